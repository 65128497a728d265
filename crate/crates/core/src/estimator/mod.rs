//! Heart-rate estimation from BVP.
//!
//! The product estimator is a short-time Fourier transform over a 30 s window
//! (3000 samples at 100 Hz) advanced every 7.5 s (750 samples, 75 % overlap).
//! Each window is divided by its maximum absolute value, transformed, restricted
//! to 40..=300 bpm, and the strongest bin is reported. "Strongest" is either the
//! largest |Re X[k]| ([`SpectrumMode::RealPart`]) or the largest |X[k]|
//! ([`SpectrumMode::Magnitude`]).
//!
//! [`oracle_peak_interval`] is a time-domain peak detector used only to
//! cross-check the spectral estimate.

mod peaks;
mod spectrum;
mod window;

pub use peaks::{oracle_peak_interval, PeakEstimate, PEAK_HEIGHT_FRACTION, REFRACTORY_S};
pub use spectrum::{estimate_window, WindowEstimator, LOW_CONFIDENCE_FACTOR};
pub use window::{batch_estimates, SlidingWindow};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumMode {
    RealPart,
    #[default]
    Magnitude,
}

impl SpectrumMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SpectrumMode::RealPart => "real-part",
            SpectrumMode::Magnitude => "magnitude",
        }
    }
}

impl std::str::FromStr for SpectrumMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real-part" => Ok(SpectrumMode::RealPart),
            "magnitude" => Ok(SpectrumMode::Magnitude),
            other => Err(format!("unknown spectrum mode {other:?} (expected real-part or magnitude)")),
        }
    }
}

impl std::fmt::Display for SpectrumMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// STFT geometry and search band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub sample_rate_hz: f64,
    pub window_len: usize,
    pub hop: usize,
    pub min_bpm: f64,
    pub max_bpm: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self::from_seconds(100.0, 30.0, 0.75)
    }
}

impl EstimatorConfig {
    pub fn from_seconds(sample_rate_hz: f64, window_s: f64, overlap: f64) -> Self {
        let window_len = (window_s * sample_rate_hz).round() as usize;
        let hop = (window_len as f64 * (1.0 - overlap)).round() as usize;
        Self {
            sample_rate_hz,
            window_len,
            hop,
            min_bpm: 40.0,
            max_bpm: 300.0,
        }
    }

    /// Spacing of DFT bins in bpm: `fs / N * 60`.
    pub fn bin_width_bpm(&self) -> f64 {
        self.sample_rate_hz * 60.0 / self.window_len as f64
    }

    pub fn bin_bpm(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate_hz * 60.0 / self.window_len as f64
    }

    /// Inclusive bin range whose centre frequencies lie within the bpm band.
    pub fn band_bins(&self) -> std::ops::RangeInclusive<usize> {
        const EPS: f64 = 1e-9;
        let width = self.bin_width_bpm();
        let lo = (self.min_bpm / width - EPS).ceil().max(1.0) as usize;
        let hi = ((self.max_bpm / width + EPS).floor() as usize).min(self.window_len / 2);
        lo..=hi
    }

    /// Hop duration in milliseconds of signal time.
    pub fn hop_ms(&self) -> f64 {
        self.hop as f64 * 1000.0 / self.sample_rate_hz
    }
}

/// One heart-rate reading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrEstimate {
    pub bpm: f64,
    pub bin_index: usize,
    pub bin_width_bpm: f64,
    /// Timestamp of the last sample in the window (0 when estimated from bare values).
    pub window_end_t_ms: u64,
    pub mode: SpectrumMode,
    /// Selected spectral value on the max-normalised window.
    pub peak_value: f64,
    /// Peak below [`LOW_CONFIDENCE_FACTOR`] × N: the window carries no usable
    /// in-band energy (e.g. a constant signal).
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EstimateError {
    #[error("window has {got} samples, expected {expected}")]
    WindowLength { expected: usize, got: usize },
    #[error("window is all zeros: no dominant frequency")]
    NoDominantFrequency,
    #[error("window contains non-finite samples")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StreamError {
    #[error("sample at {got} ms is not after previous sample at {previous} ms")]
    OutOfOrder { previous: u64, got: u64 },
    #[error("gap from {previous} ms to {got} ms ({missing} samples missing)")]
    Gap { previous: u64, got: u64, missing: u64 },
    #[error(transparent)]
    Estimate(#[from] EstimateError),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("found {found} peaks, need at least 2")]
    InsufficientPeaks { found: usize },
}
