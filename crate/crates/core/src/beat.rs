//! Beat scheduling and the servo beat model.
//!
//! The actuator firmware understands a single command: perform one beat, a full
//! 0°→180°→0° sweep at full speed. The scheduler turns a target heart rate into
//! timed beat commands. A new rate never preempts the beat that is already
//! scheduled; it applies from the following interval. A stalled driver drops
//! missed beats instead of queueing them, and a sweep still in flight causes the
//! next beat to be dropped because a servo cannot queue sweeps.

use serde::{Deserialize, Serialize};

pub const MIN_BPM: f64 = 40.0;
pub const MAX_BPM: f64 = 300.0;
pub const DEFAULT_SWEEP_MS: u64 = 300;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BeatError {
    #[error("rate {0} bpm outside [{MIN_BPM}, {MAX_BPM}]")]
    RateOutOfRange(f64),
    #[error("beat at {now_ms} ms dropped: previous sweep runs until {busy_until_ms} ms")]
    Saturated { now_ms: u64, busy_until_ms: u64 },
    #[error("beat requested while stopped")]
    Stopped,
}

/// "Perform one beat", as sent to the actuator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeatCommand {
    /// When the beat was due.
    pub scheduled_ms: u64,
    /// When the driver noticed it (≥ `scheduled_ms`).
    pub issued_ms: u64,
    pub bpm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightEvent {
    pub start_ms: u64,
    pub duration_ms: u64,
}

/// Servo keyframes for one beat: `(offset_ms, angle_deg)` relative to `start_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionProfile {
    pub start_ms: u64,
    pub keyframes: Vec<(u64, f64)>,
    pub light: Option<LightEvent>,
}

impl MotionProfile {
    pub fn duration_ms(&self) -> u64 {
        self.keyframes.last().map_or(0, |(t, _)| *t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServoConfig {
    pub sweep_ms: u64,
    /// LEDs existed on the hardware but stayed dark during the study.
    pub led_enabled: bool,
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            sweep_ms: DEFAULT_SWEEP_MS,
            led_enabled: false,
        }
    }
}

/// Beat timing plus servo occupancy for one actuator.
#[derive(Debug, Clone, Default)]
pub struct BeatScheduler {
    servo: ServoConfig,
    current_bpm: Option<f64>,
    next_beat_ms: Option<f64>,
    busy_until_ms: Option<u64>,
    executed: u64,
    dropped: u64,
}

impl BeatScheduler {
    pub fn new(servo: ServoConfig) -> Self {
        Self {
            servo,
            ..Self::default()
        }
    }

    pub fn current_bpm(&self) -> Option<f64> {
        self.current_bpm
    }

    pub fn interval_ms(&self) -> Option<f64> {
        self.current_bpm.map(|bpm| 60_000.0 / bpm)
    }

    pub fn next_beat_ms(&self) -> Option<f64> {
        self.next_beat_ms
    }

    pub fn is_beating(&self) -> bool {
        self.current_bpm.is_some()
    }

    pub fn led_enabled(&self) -> bool {
        self.servo.led_enabled
    }

    pub fn executed(&self) -> u64 {
        self.executed
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Sets the beat rate. Out-of-band rates leave the state unchanged. An
    /// already scheduled beat keeps its time.
    pub fn set_rate(&mut self, bpm: f64) -> Result<(), BeatError> {
        if !(MIN_BPM..=MAX_BPM).contains(&bpm) {
            return Err(BeatError::RateOutOfRange(bpm));
        }
        self.current_bpm = Some(bpm);
        Ok(())
    }

    pub fn stop(&mut self) {
        self.current_bpm = None;
        self.next_beat_ms = None;
    }

    /// Advances the driver to `now_ms`. The first tick after starting anchors the
    /// schedule one interval ahead. At most one command per tick; beats missed
    /// during a stall are dropped and the schedule restarts from `now_ms`.
    pub fn tick(&mut self, now_ms: u64) -> Option<BeatCommand> {
        let bpm = self.current_bpm?;
        let interval = 60_000.0 / bpm;
        let now = now_ms as f64;
        let Some(next) = self.next_beat_ms else {
            self.next_beat_ms = Some(now + interval);
            return None;
        };
        if now < next {
            return None;
        }
        let mut following = next + interval;
        if following <= now {
            following = now + interval;
        }
        self.next_beat_ms = Some(following);
        Some(BeatCommand {
            scheduled_ms: next.round() as u64,
            issued_ms: now_ms,
            bpm,
        })
    }

    /// Starts one servo sweep at `now_ms`, or drops the beat if the previous
    /// sweep has not finished.
    pub fn execute_beat(&mut self, now_ms: u64) -> Result<MotionProfile, BeatError> {
        if !self.is_beating() {
            return Err(BeatError::Stopped);
        }
        if let Some(busy_until_ms) = self.busy_until_ms.filter(|&until| now_ms < until) {
            self.dropped += 1;
            return Err(BeatError::Saturated { now_ms, busy_until_ms });
        }
        let sweep = self.servo.sweep_ms;
        self.busy_until_ms = Some(now_ms + sweep);
        self.executed += 1;
        Ok(MotionProfile {
            start_ms: now_ms,
            keyframes: vec![(0, 0.0), (sweep / 2, 180.0), (sweep, 0.0)],
            light: self.servo.led_enabled.then_some(LightEvent {
                start_ms: now_ms,
                duration_ms: sweep,
            }),
        })
    }
}
