use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{sample_timestamp_ms, ArtifactInjector, BvpConfig, BvpSample, ConfigError};

// Keeps the artifact stream independent of the noise stream for a given seed.
const ARTIFACT_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Endless BVP stream for a validated [`BvpConfig`].
#[derive(Debug, Clone)]
pub struct BvpGenerator {
    config: BvpConfig,
    index: u64,
    beat_start_s: f64,
    beat_period_s: f64,
    noise: Option<(ChaCha8Rng, Normal<f64>)>,
    artifacts: Option<ArtifactInjector>,
}

impl BvpGenerator {
    pub fn new(config: BvpConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let noise = (config.noise_sigma > 0.0).then(|| {
            (
                ChaCha8Rng::seed_from_u64(config.seed),
                Normal::new(0.0, config.noise_sigma).expect("validated sigma"),
            )
        });
        let artifacts = (config.artifact_rate > 0.0 && config.artifact_amplitude > 0.0).then(|| {
            ArtifactInjector::new(
                config.artifact_rate,
                config.artifact_amplitude,
                config.seed ^ ARTIFACT_SEED_SALT,
            )
        });
        let beat_period_s = 60.0 / config.hr_profile.bpm_at(0.0);
        Ok(Self {
            config,
            index: 0,
            beat_start_s: 0.0,
            beat_period_s,
            noise,
            artifacts,
        })
    }

    pub fn config(&self) -> &BvpConfig {
        &self.config
    }

    /// Start times of beats are where rate changes take effect.
    fn advance_beats(&mut self, t_s: f64) {
        while t_s >= self.beat_start_s + self.beat_period_s {
            self.beat_start_s += self.beat_period_s;
            self.beat_period_s = 60.0 / self.config.hr_profile.bpm_at(self.beat_start_s);
        }
    }

    pub fn next_sample(&mut self) -> BvpSample {
        let t_s = self.index as f64 / self.config.sample_rate_hz;
        self.advance_beats(t_s);
        let phase = (t_s - self.beat_start_s) / self.beat_period_s;
        let mut value = self.config.pulse_shape.value_at(phase);
        if let Some((rng, normal)) = self.noise.as_mut() {
            value += normal.sample(rng);
        }
        if let Some(artifacts) = self.artifacts.as_mut() {
            value += artifacts.offset_at(t_s);
        }
        let sample = BvpSample {
            t_ms: sample_timestamp_ms(self.index, self.config.sample_rate_hz),
            value,
        };
        self.index += 1;
        sample
    }
}

impl Iterator for BvpGenerator {
    type Item = BvpSample;

    fn next(&mut self) -> Option<BvpSample> {
        Some(self.next_sample())
    }
}

/// `floor(duration_s * sample_rate_hz)` samples of the configured stream.
pub fn synthesize(config: &BvpConfig, duration_s: f64) -> Result<Vec<BvpSample>, ConfigError> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(ConfigError::Duration(duration_s));
    }
    let generator = BvpGenerator::new(config.clone())?;
    let count = (duration_s * config.sample_rate_hz).floor() as usize;
    Ok(generator.take(count).collect())
}
