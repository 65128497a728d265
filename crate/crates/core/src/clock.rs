//! Signal-time clock shared by the tasks of a simulated device.
//!
//! Signal time advances `factor` times faster than wall time, so an accelerated
//! clock scales sample pacing, estimator hops and beat intervals uniformly.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Wall,
    Accelerated(f64),
}

impl ClockMode {
    pub fn factor(self) -> f64 {
        match self {
            ClockMode::Wall => 1.0,
            ClockMode::Accelerated(f) => f,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimClock {
    epoch: Instant,
    factor: f64,
}

impl SimClock {
    pub fn start(mode: ClockMode) -> Self {
        Self::with_epoch(Instant::now(), mode)
    }

    pub fn with_epoch(epoch: Instant, mode: ClockMode) -> Self {
        let factor = mode.factor();
        assert!(factor > 0.0 && factor.is_finite(), "clock factor must be positive");
        Self { epoch, factor }
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    pub fn epoch(&self) -> Instant {
        self.epoch
    }

    /// Signal milliseconds elapsed at `at`.
    pub fn signal_ms_at(&self, at: Instant) -> f64 {
        at.saturating_duration_since(self.epoch).as_secs_f64() * 1000.0 * self.factor
    }

    pub fn now_ms(&self) -> f64 {
        self.signal_ms_at(Instant::now())
    }

    /// Wall instant at which signal time reaches `signal_ms`.
    pub fn instant_at(&self, signal_ms: f64) -> Instant {
        self.epoch + Duration::from_secs_f64((signal_ms / self.factor / 1000.0).max(0.0))
    }

    /// Wall duration of a signal-time span.
    pub fn wall_duration(&self, signal_ms: f64) -> Duration {
        Duration::from_secs_f64((signal_ms / self.factor / 1000.0).max(0.0))
    }
}
