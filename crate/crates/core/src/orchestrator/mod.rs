//! Session control for one pair of devices: modality routing, movie metadata,
//! the JSONL session log and the WebSocket bridge for an operator console.

pub mod bridge;
pub mod plan;
pub mod record;
pub mod session;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use bridge::{bridge_serve, BridgeError, BridgeHandle, Reply};
pub use plan::{generate_condition_orders, PlanError, Segment, SessionPlan, MOVIES};
pub use record::{read_log, validate_log, LogError, LogIssue, RecordBody, SessionRecord};
pub use session::{
    start_session, DeviceEndpoint, LogTarget, SessionConfig, SessionError, SessionEvent, SessionHandle, SessionPhase,
    SessionStatus,
};

/// Which heartbeat drives each participant's display.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    WithoutHeart,
    WithOwnHeart,
    WithNeighborHeart,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::WithoutHeart, Modality::WithOwnHeart, Modality::WithNeighborHeart];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::WithoutHeart => "WithoutHeart",
            Modality::WithOwnHeart => "WithOwnHeart",
            Modality::WithNeighborHeart => "WithNeighborHeart",
        }
    }

    /// Target of `source`'s heart rate for a pair of devices indexed 0 and 1.
    pub fn route(self, source: usize) -> Option<usize> {
        match self {
            Modality::WithoutHeart => None,
            Modality::WithOwnHeart => Some(source),
            Modality::WithNeighborHeart => Some(1 - source),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown modality {0:?} (expected WithoutHeart, WithOwnHeart or WithNeighborHeart)")]
pub struct UnknownModality(pub String);

impl FromStr for Modality {
    type Err = UnknownModality;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| UnknownModality(s.to_owned()))
    }
}
