use super::OracleError;

/// Minimum peak height relative to the window maximum.
pub const PEAK_HEIGHT_FRACTION: f64 = 0.6;
/// Minimum spacing between accepted peaks (300 bpm).
pub const REFRACTORY_S: f64 = 0.2;

/// Time-domain heart-rate estimate from inter-peak intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakEstimate {
    pub bpm: f64,
    /// Sub-sample peak positions, in samples.
    pub peaks: Vec<f64>,
    pub median_interval_s: f64,
}

/// Peak-interval heart rate: local maxima above 60 % of the max-normalised
/// window, at least 0.2 s apart (taller peak wins), located to sub-sample
/// precision by parabolic interpolation. `bpm = 60 / median interval`.
///
/// Cross-check only; the product estimator is spectral.
pub fn oracle_peak_interval(samples: &[f64], sample_rate_hz: f64) -> Result<PeakEstimate, OracleError> {
    let scale = samples.iter().fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { m });
    if scale == 0.0 || samples.len() < 3 {
        return Err(OracleError::InsufficientPeaks { found: 0 });
    }
    let x: Vec<f64> = samples.iter().map(|v| v / scale).collect();

    let mut candidates: Vec<usize> = (1..x.len() - 1)
        .filter(|&i| x[i] >= PEAK_HEIGHT_FRACTION && x[i] > x[i - 1] && x[i] >= x[i + 1])
        .collect();
    candidates.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));

    let refractory = REFRACTORY_S * sample_rate_hz;
    let mut accepted: Vec<usize> = Vec::new();
    for i in candidates {
        if accepted.iter().all(|&j| (i as f64 - j as f64).abs() >= refractory) {
            accepted.push(i);
        }
    }
    if accepted.len() < 2 {
        return Err(OracleError::InsufficientPeaks { found: accepted.len() });
    }
    accepted.sort_unstable();

    let peaks: Vec<f64> = accepted
        .iter()
        .map(|&i| {
            let (a, b, c) = (x[i - 1], x[i], x[i + 1]);
            let denom = a - 2.0 * b + c;
            let offset = if denom.abs() > f64::EPSILON { 0.5 * (a - c) / denom } else { 0.0 };
            i as f64 + offset.clamp(-0.5, 0.5)
        })
        .collect();

    let mut intervals: Vec<f64> = peaks.windows(2).map(|w| (w[1] - w[0]) / sample_rate_hz).collect();
    intervals.sort_by(f64::total_cmp);
    let mid = intervals.len() / 2;
    let median = if intervals.len() % 2 == 1 {
        intervals[mid]
    } else {
        0.5 * (intervals[mid - 1] + intervals[mid])
    };

    Ok(PeakEstimate {
        bpm: 60.0 / median,
        peaks,
        median_interval_s: median,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvp::{synthesize, BvpConfig};

    fn values(bpm: f64) -> Vec<f64> {
        synthesize(&BvpConfig::constant(bpm), 30.0)
            .unwrap()
            .iter()
            .map(|s| s.value)
            .collect()
    }

    #[test]
    fn sixty_bpm_within_half_bpm() {
        let e = oracle_peak_interval(&values(60.0), 100.0).unwrap();
        assert!((e.bpm - 60.0).abs() <= 0.5, "{}", e.bpm);
        // one systolic peak per beat, notch not counted
        assert_eq!(e.peaks.len(), 30);
        // systolic centre sits at 15 % of each 100-sample beat
        assert!((e.peaks[0] - 15.0).abs() < 0.5);
    }

    #[test]
    fn one_fifty_bpm_within_one_bpm() {
        let e = oracle_peak_interval(&values(150.0), 100.0).unwrap();
        assert!((e.bpm - 150.0).abs() <= 1.0, "{}", e.bpm);
    }

    #[test]
    fn flat_signal_has_no_peaks() {
        assert_eq!(
            oracle_peak_interval(&vec![0.0; 3000], 100.0),
            Err(OracleError::InsufficientPeaks { found: 0 })
        );
        assert!(oracle_peak_interval(&vec![1.0; 3000], 100.0).is_err());
    }

    #[test]
    fn single_pulse_is_insufficient() {
        let mut x = vec![0.0; 300];
        x[150] = 1.0;
        assert_eq!(
            oracle_peak_interval(&x, 100.0),
            Err(OracleError::InsufficientPeaks { found: 1 })
        );
    }

    #[test]
    fn refractory_keeps_taller_peak() {
        let mut x = vec![0.0; 400];
        x[100] = 1.0;
        x[110] = 0.9; // inside 0.2 s of the taller peak
        x[300] = 1.0;
        let e = oracle_peak_interval(&x, 100.0).unwrap();
        assert_eq!(e.peaks, vec![100.0, 300.0]);
        assert!((e.bpm - 30.0).abs() < 1e-9);
    }
}
