//! Synthetic blood-volume-pulse (BVP) streams standing in for the optical
//! heart-rate sensor.
//!
//! Each beat is a raised-cosine systolic peak followed by a smaller raised-cosine
//! dicrotic notch. Heart-rate changes are applied at beat boundaries so the
//! waveform stays continuous. Gaussian noise and movement artifacts are drawn
//! from seeded ChaCha8 generators, so a config plus seed always yields the same
//! stream.

mod artifacts;
mod replay;
mod synth;

pub use artifacts::{inject_artifacts, ArtifactEvent, ArtifactInjector, ArtifactSchedule, BURST_DURATION_S};
pub use replay::{read_csv, replay, write_csv, CSV_HEADER};
pub use synth::{synthesize, BvpGenerator};

use serde::{Deserialize, Serialize};

/// One timestamped BVP amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BvpSample {
    /// Milliseconds since stream start.
    pub t_ms: u64,
    pub value: f64,
}

impl BvpSample {
    pub fn new(t_ms: u64, value: f64) -> Self {
        Self { t_ms, value }
    }
}

/// Timestamp of sample `index` at `sample_rate_hz`, rounded to whole milliseconds.
pub fn sample_timestamp_ms(index: u64, sample_rate_hz: f64) -> u64 {
    (index as f64 * 1000.0 / sample_rate_hz).round() as u64
}

/// Target heart rate over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HrProfile {
    Constant(f64),
    /// Piecewise-constant: `(start_s, bpm)` pairs sorted by start time. The first
    /// segment's bpm also covers any time before its start.
    Steps(Vec<(f64, f64)>),
    /// Linear ramp from `start_bpm` to `end_bpm` over `duration_s`, then held.
    Ramp {
        start_bpm: f64,
        end_bpm: f64,
        duration_s: f64,
    },
}

impl HrProfile {
    pub fn bpm_at(&self, t_s: f64) -> f64 {
        match self {
            HrProfile::Constant(bpm) => *bpm,
            HrProfile::Steps(steps) => steps
                .iter()
                .take_while(|(start, _)| *start <= t_s)
                .last()
                .or_else(|| steps.first())
                .map(|(_, bpm)| *bpm)
                .unwrap_or(0.0),
            HrProfile::Ramp {
                start_bpm,
                end_bpm,
                duration_s,
            } => {
                if *duration_s <= 0.0 || t_s >= *duration_s {
                    *end_bpm
                } else {
                    let frac = (t_s / duration_s).max(0.0);
                    start_bpm + (end_bpm - start_bpm) * frac
                }
            }
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            HrProfile::Constant(bpm) => vec![*bpm],
            HrProfile::Steps(steps) => steps.iter().map(|(_, bpm)| *bpm).collect(),
            HrProfile::Ramp {
                start_bpm, end_bpm, ..
            } => vec![*start_bpm, *end_bpm],
        }
    }
}

/// Per-beat waveform parameters. Centers, delays and widths are fractions of the
/// beat period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseShape {
    pub systolic_amplitude: f64,
    pub systolic_center: f64,
    pub systolic_half_width: f64,
    /// Notch amplitude relative to the systolic peak.
    pub notch_relative_amplitude: f64,
    pub notch_delay: f64,
    pub notch_half_width: f64,
}

impl Default for PulseShape {
    fn default() -> Self {
        Self {
            systolic_amplitude: 1.0,
            systolic_center: 0.15,
            systolic_half_width: 0.15,
            notch_relative_amplitude: 0.5,
            notch_delay: 0.4,
            notch_half_width: 0.12,
        }
    }
}

fn raised_cosine(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * (1.0 + (std::f64::consts::PI * x).cos())
    } else {
        0.0
    }
}

impl PulseShape {
    /// Clean waveform value at `phase` in `[0, 1)` of the current beat.
    pub fn value_at(&self, phase: f64) -> f64 {
        let systolic = raised_cosine((phase - self.systolic_center) / self.systolic_half_width);
        let notch = raised_cosine((phase - self.notch_delay) / self.notch_half_width);
        self.systolic_amplitude * (systolic + self.notch_relative_amplitude * notch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BvpConfig {
    pub sample_rate_hz: f64,
    pub hr_profile: HrProfile,
    pub pulse_shape: PulseShape,
    pub noise_sigma: f64,
    /// Expected movement-artifact bursts per minute.
    pub artifact_rate: f64,
    pub artifact_amplitude: f64,
    pub seed: u64,
}

impl Default for BvpConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 100.0,
            hr_profile: HrProfile::Constant(72.0),
            pulse_shape: PulseShape::default(),
            noise_sigma: 0.0,
            artifact_rate: 0.0,
            artifact_amplitude: 2.0,
            seed: 0,
        }
    }
}

impl BvpConfig {
    pub fn constant(bpm: f64) -> Self {
        Self {
            hr_profile: HrProfile::Constant(bpm),
            ..Self::default()
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(ConfigError::SampleRate(self.sample_rate_hz));
        }
        let values = self.hr_profile.values();
        if values.is_empty() {
            return Err(ConfigError::EmptyProfile);
        }
        if let Some(bad) = values.iter().find(|v| !(**v > 0.0 && **v <= 300.0)) {
            return Err(ConfigError::HeartRate(*bad));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(ConfigError::NoiseSigma(self.noise_sigma));
        }
        if !(self.artifact_rate >= 0.0 && self.artifact_rate.is_finite()) {
            return Err(ConfigError::ArtifactRate(self.artifact_rate));
        }
        if !(self.artifact_amplitude >= 0.0 && self.artifact_amplitude.is_finite()) {
            return Err(ConfigError::ArtifactAmplitude(self.artifact_amplitude));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("sample rate must be positive, got {0}")]
    SampleRate(f64),
    #[error("heart-rate profile has no values")]
    EmptyProfile,
    #[error("heart rate {0} bpm outside (0, 300]")]
    HeartRate(f64),
    #[error("noise sigma must be non-negative, got {0}")]
    NoiseSigma(f64),
    #[error("artifact rate must be non-negative, got {0}")]
    ArtifactRate(f64),
    #[error("artifact amplitude must be non-negative, got {0}")]
    ArtifactAmplitude(f64),
    #[error("duration must be positive, got {0}")]
    Duration(f64),
}

/// Errors from reading a BVP CSV file.
#[derive(Debug, thiserror::Error)]
pub enum InputError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}
