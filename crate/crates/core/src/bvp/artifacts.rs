use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use super::{BvpSample, ConfigError};

/// Length of one low-frequency movement burst. A 3 s half-sine has its energy
/// well below 40 bpm (0.67 Hz).
pub const BURST_DURATION_S: f64 = 3.0;

/// Onset of one movement artifact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArtifactEvent {
    pub onset_s: f64,
}

/// Poisson-distributed artifact onsets, `rate_per_min` on average.
#[derive(Debug, Clone)]
pub struct ArtifactSchedule {
    rng: ChaCha8Rng,
    gap: Option<Exp<f64>>,
    last_s: f64,
}

impl ArtifactSchedule {
    pub fn new(rate_per_min: f64, seed: u64) -> Self {
        let gap = (rate_per_min > 0.0).then(|| Exp::new(rate_per_min / 60.0).expect("positive rate"));
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            gap,
            last_s: 0.0,
        }
    }

    /// All onsets strictly before `end_s`.
    pub fn until(self, end_s: f64) -> Vec<ArtifactEvent> {
        self.take_while(|e| e.onset_s < end_s).collect()
    }
}

impl Iterator for ArtifactSchedule {
    type Item = ArtifactEvent;

    fn next(&mut self) -> Option<ArtifactEvent> {
        let gap = self.gap.as_ref()?;
        self.last_s += gap.sample(&mut self.rng);
        Some(ArtifactEvent {
            onset_s: self.last_s,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct ActiveBurst {
    onset_s: f64,
    spike_pending: bool,
}

/// Streaming artifact overlay: a half-sine burst of [`BURST_DURATION_S`] plus a
/// one-sample spike at each onset. Query times must not decrease.
#[derive(Debug, Clone)]
pub struct ArtifactInjector {
    schedule: ArtifactSchedule,
    amplitude: f64,
    upcoming: Option<ArtifactEvent>,
    active: Vec<ActiveBurst>,
    bursts_started: usize,
}

impl ArtifactInjector {
    pub fn new(rate_per_min: f64, amplitude: f64, seed: u64) -> Self {
        let mut schedule = ArtifactSchedule::new(rate_per_min, seed);
        let upcoming = schedule.next();
        Self {
            schedule,
            amplitude,
            upcoming,
            active: Vec::new(),
            bursts_started: 0,
        }
    }

    pub fn bursts_started(&self) -> usize {
        self.bursts_started
    }

    /// Additive artifact value at `t_s`.
    pub fn offset_at(&mut self, t_s: f64) -> f64 {
        while let Some(event) = self.upcoming.filter(|e| e.onset_s <= t_s) {
            self.active.push(ActiveBurst {
                onset_s: event.onset_s,
                spike_pending: true,
            });
            self.bursts_started += 1;
            self.upcoming = self.schedule.next();
        }
        self.active.retain(|b| t_s - b.onset_s < BURST_DURATION_S);

        let mut offset = 0.0;
        for burst in &mut self.active {
            let elapsed = t_s - burst.onset_s;
            offset += self.amplitude * (std::f64::consts::PI * elapsed / BURST_DURATION_S).sin();
            if burst.spike_pending {
                offset += self.amplitude;
                burst.spike_pending = false;
            }
        }
        offset
    }
}

/// Overlays movement artifacts on an existing stream. Identity when either the
/// rate or the amplitude is zero.
pub fn inject_artifacts(
    stream: &[BvpSample],
    artifact_rate: f64,
    burst_amplitude: f64,
    seed: u64,
) -> Result<Vec<BvpSample>, ConfigError> {
    if !(artifact_rate >= 0.0 && artifact_rate.is_finite()) {
        return Err(ConfigError::ArtifactRate(artifact_rate));
    }
    if !(burst_amplitude >= 0.0 && burst_amplitude.is_finite()) {
        return Err(ConfigError::ArtifactAmplitude(burst_amplitude));
    }
    if artifact_rate == 0.0 || burst_amplitude == 0.0 {
        return Ok(stream.to_vec());
    }
    let mut injector = ArtifactInjector::new(artifact_rate, burst_amplitude, seed);
    Ok(stream
        .iter()
        .map(|s| BvpSample {
            t_ms: s.t_ms,
            value: s.value + injector.offset_at(s.t_ms as f64 / 1000.0),
        })
        .collect())
}
