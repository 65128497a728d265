use crate::bvp::BvpSample;

use super::{EstimatorConfig, HrEstimate, SpectrumMode, StreamError, WindowEstimator};

/// Streaming STFT front end: a ring of the most recent `window_len` samples that
/// yields an estimate once the window is full and then every `hop` samples.
#[derive(Debug)]
pub struct SlidingWindow {
    ring: Vec<f64>,
    head: usize,
    total_pushed: u64,
    last_t_ms: Option<u64>,
    ordered: Vec<f64>,
    estimator: WindowEstimator,
}

impl SlidingWindow {
    pub fn new(config: EstimatorConfig) -> Self {
        Self {
            ring: vec![0.0; config.window_len],
            head: 0,
            total_pushed: 0,
            last_t_ms: None,
            ordered: Vec::with_capacity(config.window_len),
            estimator: WindowEstimator::new(config),
        }
    }

    pub fn config(&self) -> &EstimatorConfig {
        self.estimator.config()
    }

    pub fn capacity(&self) -> usize {
        self.ring.len()
    }

    pub fn total_pushed(&self) -> u64 {
        self.total_pushed
    }

    pub fn last_t_ms(&self) -> Option<u64> {
        self.last_t_ms
    }

    /// Drops all buffered samples; the next sample starts a fresh warm-up.
    pub fn reset(&mut self) {
        self.head = 0;
        self.total_pushed = 0;
        self.last_t_ms = None;
    }

    fn check_timing(&self, t_ms: u64) -> Result<(), StreamError> {
        let Some(previous) = self.last_t_ms else {
            return Ok(());
        };
        if t_ms <= previous {
            return Err(StreamError::OutOfOrder { previous, got: t_ms });
        }
        let period_ms = 1000.0 / self.config().sample_rate_hz;
        let delta = (t_ms - previous) as f64;
        if delta > 1.5 * period_ms {
            let missing = (delta / period_ms).round() as u64 - 1;
            return Err(StreamError::Gap {
                previous,
                got: t_ms,
                missing: missing.max(1),
            });
        }
        Ok(())
    }

    /// Rejected samples leave the window untouched.
    pub fn push_sample(&mut self, sample: BvpSample, mode: SpectrumMode) -> Result<Option<HrEstimate>, StreamError> {
        self.check_timing(sample.t_ms)?;
        self.last_t_ms = Some(sample.t_ms);

        let cap = self.ring.len();
        self.ring[self.head] = sample.value;
        self.head = (self.head + 1) % cap;
        self.total_pushed += 1;

        let cap = cap as u64;
        let hop = self.config().hop as u64;
        if self.total_pushed < cap || (self.total_pushed - cap) % hop != 0 {
            return Ok(None);
        }

        // head now points at the oldest sample
        self.ordered.clear();
        self.ordered.extend_from_slice(&self.ring[self.head..]);
        self.ordered.extend_from_slice(&self.ring[..self.head]);
        let mut estimate = self.estimator.estimate(&self.ordered, mode)?;
        estimate.window_end_t_ms = sample.t_ms;
        Ok(Some(estimate))
    }
}

/// Applies [`super::estimate_window`] to each hop-aligned slice of a finished
/// stream. Windows that fail to estimate are skipped.
pub fn batch_estimates(samples: &[BvpSample], config: &EstimatorConfig, mode: SpectrumMode) -> Vec<HrEstimate> {
    let mut estimator = WindowEstimator::new(*config);
    let n = config.window_len;
    if samples.len() < n {
        return Vec::new();
    }
    let values: Vec<f64> = samples.iter().map(|s| s.value).collect();
    (n..=samples.len())
        .step_by(config.hop)
        .filter_map(|end| {
            let mut e = estimator.estimate(&values[end - n..end], mode).ok()?;
            e.window_end_t_ms = samples[end - 1].t_ms;
            Some(e)
        })
        .collect()
}
