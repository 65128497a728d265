use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{EstimateError, EstimatorConfig, HrEstimate, SpectrumMode};

/// Peaks below this multiple of N are flagged low-confidence.
pub const LOW_CONFIDENCE_FACTOR: f64 = 1e-9;

/// Reusable single-window estimator holding a planned FFT and scratch buffers.
pub struct WindowEstimator {
    config: EstimatorConfig,
    fft: Arc<dyn Fft<f64>>,
    buffer: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl std::fmt::Debug for WindowEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WindowEstimator").field("config", &self.config).finish()
    }
}

impl WindowEstimator {
    pub fn new(config: EstimatorConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(config.window_len);
        let scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        Self {
            config,
            fft,
            buffer: Vec::with_capacity(config.window_len),
            scratch,
        }
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn estimate(&mut self, samples: &[f64], mode: SpectrumMode) -> Result<HrEstimate, EstimateError> {
        let n = self.config.window_len;
        if samples.len() != n {
            return Err(EstimateError::WindowLength {
                expected: n,
                got: samples.len(),
            });
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(EstimateError::NonFinite);
        }
        let scale = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return Err(EstimateError::NoDominantFrequency);
        }

        self.buffer.clear();
        self.buffer
            .extend(samples.iter().map(|v| Complex::new(v / scale, 0.0)));
        self.fft.process_with_scratch(&mut self.buffer, &mut self.scratch);

        let mut best_bin = 0;
        let mut best_value = f64::NEG_INFINITY;
        for k in self.config.band_bins() {
            let x = self.buffer[k];
            let value = match mode {
                SpectrumMode::RealPart => x.re.abs(),
                SpectrumMode::Magnitude => x.norm(),
            };
            // strict comparison: ties go to the lower bin
            if value > best_value {
                best_value = value;
                best_bin = k;
            }
        }

        Ok(HrEstimate {
            bpm: self.config.bin_bpm(best_bin),
            bin_index: best_bin,
            bin_width_bpm: self.config.bin_width_bpm(),
            window_end_t_ms: 0,
            mode,
            peak_value: best_value,
            low_confidence: best_value < LOW_CONFIDENCE_FACTOR * n as f64,
        })
    }
}

/// One-shot estimate over exactly `config.window_len` samples.
pub fn estimate_window(
    samples: &[f64],
    config: &EstimatorConfig,
    mode: SpectrumMode,
) -> Result<HrEstimate, EstimateError> {
    WindowEstimator::new(*config).estimate(samples, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    const FS: f64 = 100.0;
    const N: usize = 3000;

    fn cosine(freq_hz: f64, phase: f64) -> Vec<f64> {
        (0..N)
            .map(|i| (2.0 * PI * freq_hz * i as f64 / FS + phase).cos())
            .collect()
    }

    /// Direct O(N·K) DFT over the band with the same normalisation and
    /// selection rules, independent of the FFT path.
    fn direct_dft_argmax(samples: &[f64], mode: SpectrumMode) -> usize {
        let scale = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let n = samples.len() as f64;
        let mut best = (0, f64::NEG_INFINITY);
        for k in 20..=150usize {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in samples.iter().enumerate() {
                let a = -2.0 * PI * k as f64 * i as f64 / n;
                re += v / scale * a.cos();
                im += v / scale * a.sin();
            }
            let value = match mode {
                SpectrumMode::RealPart => re.abs(),
                SpectrumMode::Magnitude => (re * re + im * im).sqrt(),
            };
            if value > best.1 {
                best = (k, value);
            }
        }
        best.0
    }

    fn cfg() -> EstimatorConfig {
        EstimatorConfig::default()
    }

    #[test]
    fn one_hertz_cosine_is_sixty_bpm() {
        let x = cosine(1.0, 0.0);
        assert_eq!(direct_dft_argmax(&x, SpectrumMode::Magnitude), 30);
        assert_eq!(direct_dft_argmax(&x, SpectrumMode::RealPart), 30);
        for mode in [SpectrumMode::Magnitude, SpectrumMode::RealPart] {
            let e = estimate_window(&x, &cfg(), mode).unwrap();
            assert_eq!(e.bin_index, 30);
            assert_eq!(e.bpm, 60.0);
            assert!(!e.low_confidence);
        }
    }

    #[test]
    fn one_point_two_hertz_cosine_is_seventy_two_bpm() {
        let x = cosine(1.2, 0.0);
        assert_eq!(direct_dft_argmax(&x, SpectrumMode::Magnitude), 36);
        for mode in [SpectrumMode::Magnitude, SpectrumMode::RealPart] {
            let e = estimate_window(&x, &cfg(), mode).unwrap();
            assert_eq!((e.bin_index, e.bpm), (36, 72.0));
        }
    }

    #[test]
    fn bin_width_is_two_bpm() {
        let e = estimate_window(&cosine(1.0, 0.0), &cfg(), SpectrumMode::Magnitude).unwrap();
        assert_eq!(e.bin_width_bpm, 2.0);
    }

    #[test]
    fn all_zero_window_has_no_dominant_frequency() {
        let err = estimate_window(&vec![0.0; N], &cfg(), SpectrumMode::Magnitude).unwrap_err();
        assert_eq!(err, EstimateError::NoDominantFrequency);
    }

    #[test]
    fn wrong_length_rejected() {
        let err = estimate_window(&vec![1.0; 2999], &cfg(), SpectrumMode::Magnitude).unwrap_err();
        assert_eq!(err, EstimateError::WindowLength { expected: 3000, got: 2999 });
    }

    #[test]
    fn constant_signal_is_low_confidence_not_error() {
        let e = estimate_window(&vec![0.7; N], &cfg(), SpectrumMode::Magnitude).unwrap();
        assert!(e.low_confidence);
        assert!((40.0..=300.0).contains(&e.bpm));
    }

    #[test]
    fn band_excludes_out_of_range_tones() {
        // strong 20 bpm drift plus a weak 90 bpm tone: the band restriction wins
        let x: Vec<f64> = (0..N)
            .map(|i| {
                let t = i as f64 / FS;
                10.0 * (2.0 * PI * (20.0 / 60.0) * t).cos() + 0.5 * (2.0 * PI * 1.5 * t).cos()
            })
            .collect();
        let e = estimate_window(&x, &cfg(), SpectrumMode::Magnitude).unwrap();
        assert_eq!(e.bpm, 90.0);
    }

    #[test]
    fn matches_direct_dft_on_synthetic_bvp() {
        use crate::bvp::{synthesize, BvpConfig};
        for (bpm, mode) in [(48.0, SpectrumMode::Magnitude), (77.0, SpectrumMode::RealPart), (133.0, SpectrumMode::Magnitude)] {
            let s = synthesize(&BvpConfig::constant(bpm).with_noise(0.05).with_seed(3), 30.0).unwrap();
            let v: Vec<f64> = s.iter().map(|x| x.value).collect();
            let e = estimate_window(&v, &cfg(), mode).unwrap();
            assert_eq!(e.bin_index, direct_dft_argmax(&v, mode), "bpm {bpm}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn exact_bin_cosines_are_recovered(bin in 20usize..=150) {
            let x = cosine(bin as f64 / 30.0, 0.0);
            for mode in [SpectrumMode::Magnitude, SpectrumMode::RealPart] {
                let e = estimate_window(&x, &cfg(), mode).unwrap();
                prop_assert_eq!(e.bin_index, bin);
            }
        }

        #[test]
        fn scale_invariance(bpm in 40.0f64..300.0, c in 1e-6f64..1e6, seed in 0u64..1000) {
            use crate::bvp::{synthesize, BvpConfig};
            let s = synthesize(&BvpConfig::constant(bpm).with_noise(0.1).with_seed(seed), 30.0).unwrap();
            let v: Vec<f64> = s.iter().map(|x| x.value).collect();
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            for mode in [SpectrumMode::Magnitude, SpectrumMode::RealPart] {
                let a = estimate_window(&v, &cfg(), mode).unwrap();
                let b = estimate_window(&scaled, &cfg(), mode).unwrap();
                prop_assert_eq!(a.bin_index, b.bin_index);
            }
        }

        #[test]
        fn band_restriction_holds(values in proptest::collection::vec(-1e3f64..1e3, N)) {
            if let Ok(e) = estimate_window(&values, &cfg(), SpectrumMode::RealPart) {
                prop_assert!((40.0..=300.0).contains(&e.bpm));
            }
            if let Ok(e) = estimate_window(&values, &cfg(), SpectrumMode::Magnitude) {
                prop_assert!((40.0..=300.0).contains(&e.bpm));
            }
        }
    }
}
