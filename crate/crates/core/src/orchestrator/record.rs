//! Session log records and the JSONL reader/validator.
//!
//! One JSON object per line:
//! `{"ts":…,"kind":"hr","bpm":72.0,"t_ms":29990,"device":"A","modality":"WithOwnHeart","movie":"big bunny"}`

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Modality;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    /// Orchestrator wall clock, ms since the Unix epoch.
    pub ts: u64,
    #[serde(flatten)]
    pub body: RecordBody,
    /// Device label, `null` for session-level records.
    pub device: Option<String>,
    pub modality: Modality,
    pub movie: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecordBody {
    Hr { bpm: f64, t_ms: u64 },
    BvpBatch { t_ms: u64, samples: Vec<f64> },
    ModalityChange { previous: Option<Modality> },
    MovieChange { previous: Option<String> },
    BeatEvent { t_ms: u64, bpm: f64 },
}

impl RecordBody {
    pub fn kind(&self) -> &'static str {
        match self {
            RecordBody::Hr { .. } => "hr",
            RecordBody::BvpBatch { .. } => "bvp_batch",
            RecordBody::ModalityChange { .. } => "modality_change",
            RecordBody::MovieChange { .. } => "movie_change",
            RecordBody::BeatEvent { .. } => "beat_event",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("cannot read log: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Reads every record, failing on the first malformed line.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<SessionRecord>, LogError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| LogError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogIssue {
    /// 1-based line number.
    pub line: usize,
    pub problem: String,
}

/// Checks a log for unparsable lines, decreasing timestamps, untagged data
/// records and data records without a device. Returns the parsed records with
/// every problem found.
pub fn validate_log(reader: impl Read) -> Result<(Vec<SessionRecord>, Vec<LogIssue>), LogError> {
    let mut records = Vec::new();
    let mut issues = Vec::new();
    let mut last_ts: Option<u64> = None;
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let record: SessionRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                issues.push(LogIssue {
                    line: line_no,
                    problem: format!("unparsable: {e}"),
                });
                continue;
            }
        };
        if let Some(prev) = last_ts {
            if record.ts < prev {
                issues.push(LogIssue {
                    line: line_no,
                    problem: format!("ts {} is before previous ts {prev}", record.ts),
                });
            }
        }
        last_ts = Some(last_ts.map_or(record.ts, |p| p.max(record.ts)));
        let data = matches!(
            record.body,
            RecordBody::Hr { .. } | RecordBody::BvpBatch { .. } | RecordBody::BeatEvent { .. }
        );
        if data && record.device.is_none() {
            issues.push(LogIssue {
                line: line_no,
                problem: format!("{} record without device", record.body.kind()),
            });
        }
        if record.movie.trim().is_empty() {
            issues.push(LogIssue {
                line: line_no,
                problem: format!("{} record without movie", record.body.kind()),
            });
        }
        records.push(record);
    }
    Ok((records, issues))
}
