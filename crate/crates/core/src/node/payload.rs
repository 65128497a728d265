//! Topic names and JSON payloads exchanged with a device node.

use serde::{Deserialize, Serialize};

pub const TOPIC_ROOT: &str = "piheart";
pub const HR: &str = "hr";
pub const BVP: &str = "bvp";
pub const BEAT_RATE: &str = "beat_rate";
pub const BEAT_EVENT: &str = "beat_event";
pub const STATUS: &str = "status";

/// `piheart/<id>/<leaf>`
pub fn topic(device_id: &str, leaf: &str) -> String {
    format!("{TOPIC_ROOT}/{device_id}/{leaf}")
}

/// Retained on `piheart/<id>/hr` after every estimator hop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrMessage {
    /// Timestamp of the last sample in the estimator window.
    pub t_ms: u64,
    pub bpm: f64,
}

/// One second of raw signal on `piheart/<id>/bvp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvpBatch {
    /// Timestamp of `samples[0]`.
    pub t_ms: u64,
    pub samples: Vec<f64>,
}

/// Published on `piheart/<id>/beat_event` for every executed servo sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatEventMessage {
    /// Scheduled signal time of the beat on the publishing node.
    pub t_ms: u64,
    pub bpm: f64,
}

/// Node lifecycle and stream errors on `piheart/<id>/status`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum StatusMessage {
    Online,
    StreamError { t_ms: u64, error: String, dropped_samples: u64 },
    Offline,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid beat_rate payload: {0}")]
pub struct PayloadError(pub String);

/// Payload of `piheart/<id>/beat_rate`.
///
/// Accepted forms: `{"bpm":72.0,"source":"A","t_ms":30000}` (source and t_ms
/// optional), `{"stop":true}`, a bare number such as `72`, or the text `stop`.
#[derive(Debug, Clone, PartialEq)]
pub enum BeatRateCommand {
    Rate {
        bpm: f64,
        /// Device whose heart rate this is, when routed by an orchestrator.
        source: Option<String>,
        /// `t_ms` of the hr message that triggered this command.
        t_ms: Option<u64>,
    },
    Stop,
}

#[derive(Serialize, Deserialize)]
struct RateWire {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bpm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    stop: bool,
}

impl BeatRateCommand {
    pub fn rate(bpm: f64) -> Self {
        BeatRateCommand::Rate {
            bpm,
            source: None,
            t_ms: None,
        }
    }

    pub fn parse(payload: &[u8]) -> Result<Self, PayloadError> {
        let text = std::str::from_utf8(payload).map_err(|_| PayloadError("not UTF-8".into()))?.trim();
        if text.eq_ignore_ascii_case("stop") {
            return Ok(BeatRateCommand::Stop);
        }
        if let Ok(bpm) = text.parse::<f64>() {
            return Self::checked(bpm, None, None);
        }
        let wire: RateWire = serde_json::from_str(text).map_err(|e| PayloadError(e.to_string()))?;
        match (wire.stop, wire.bpm) {
            (true, _) => Ok(BeatRateCommand::Stop),
            (false, Some(bpm)) => Self::checked(bpm, wire.source, wire.t_ms),
            (false, None) => Err(PayloadError("neither bpm nor stop given".into())),
        }
    }

    fn checked(bpm: f64, source: Option<String>, t_ms: Option<u64>) -> Result<Self, PayloadError> {
        if !bpm.is_finite() {
            return Err(PayloadError(format!("bpm {bpm} is not finite")));
        }
        Ok(BeatRateCommand::Rate { bpm, source, t_ms })
    }

    pub fn to_json(&self) -> String {
        let wire = match self {
            BeatRateCommand::Rate { bpm, source, t_ms } => RateWire {
                bpm: Some(*bpm),
                source: source.clone(),
                t_ms: *t_ms,
                stop: false,
            },
            BeatRateCommand::Stop => RateWire {
                bpm: None,
                source: None,
                t_ms: None,
                stop: true,
            },
        };
        serde_json::to_string(&wire).expect("plain struct serializes")
    }
}
