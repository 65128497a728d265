use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{BvpSample, InputError};

pub const CSV_HEADER: &str = "t_ms,value";

/// Loads a BVP CSV file (`t_ms,value`, header optional).
pub fn replay(path: impl AsRef<Path>) -> Result<Vec<BvpSample>, InputError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| InputError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file)
}

/// Parses BVP CSV rows. Line numbers in errors are 1-based physical lines.
pub fn read_csv(reader: impl Read) -> Result<Vec<BvpSample>, InputError> {
    let mut samples: Vec<BvpSample> = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| InputError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let row = line.trim_end_matches('\r');
        if row.trim().is_empty() || (line_no == 1 && row.trim() == CSV_HEADER) {
            continue;
        }
        let parse_err = |message: String| InputError::Parse {
            line: line_no,
            message,
        };
        let (t, v) = row
            .split_once(',')
            .ok_or_else(|| parse_err(format!("expected `t_ms,value`, got {row:?}")))?;
        let t_ms: u64 = t
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("invalid timestamp {t:?}")))?;
        let value: f64 = v
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("invalid value {v:?}")))?;
        if !value.is_finite() {
            return Err(parse_err(format!("non-finite value {v:?}")));
        }
        if let Some(prev) = samples.last() {
            if t_ms <= prev.t_ms {
                return Err(parse_err(format!(
                    "timestamp {t_ms} does not increase (previous {})",
                    prev.t_ms
                )));
            }
        }
        samples.push(BvpSample { t_ms, value });
    }
    Ok(samples)
}

pub fn write_csv(samples: &[BvpSample], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for s in samples {
        writeln!(out, "{},{}", s.t_ms, s.value)?;
    }
    out.flush()
}
