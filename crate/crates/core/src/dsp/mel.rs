//! Triangular mel filterbank on the HTK mel scale.

use crate::error::{Error, Result};
use crate::mat::Mat;

/// HTK mel scale: `m(f) = 2595 * log10(1 + f / 700)`.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Bank of triangular filters with peaks equally spaced on the mel scale.
/// Filter `i` rises from mel point `i-1`, peaks at point `i`, and falls to
/// point `i+1`; weights are evaluated at the FFT bin center frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `n_mels x (fft_len/2 + 1)` nonnegative weights.
    pub weights: Mat,
    pub f_min: f64,
    pub f_max: f64,
    /// Peak frequency of each filter in Hz.
    pub peaks_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, fft_len: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) {
            return Err(Error::parameter(format!(
                "need 0 <= f_min ({f_min}) < f_max ({f_max}) <= nyquist ({nyquist})"
            )));
        }
        if n_mels < 2 {
            return Err(Error::parameter(format!("n_mels {n_mels} < 2")));
        }

        let n_bins = fft_len / 2 + 1;
        let mel_lo = hz_to_mel(f_min);
        let mel_hi = hz_to_mel(f_max);
        // n_mels + 2 points: each filter spans three consecutive ones
        let points_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();

        let bin_hz = sample_rate as f64 / fft_len as f64;
        let weights = Mat::from_fn(n_mels, n_bins, |m, k| {
            let f = k as f64 * bin_hz;
            let (lo, peak, hi) = (points_hz[m], points_hz[m + 1], points_hz[m + 2]);
            let w = if f <= peak { (f - lo) / (peak - lo) } else { (hi - f) / (hi - peak) };
            w.max(0.0)
        });

        for m in 0..n_mels {
            let sum: f64 = weights.row(m).iter().sum();
            if sum <= 0.0 {
                return Err(Error::parameter(format!(
                    "mel filter {m} covers no FFT bin; raise fft_len or lower n_mels"
                )));
            }
        }

        Ok(MelFilterbank { weights, f_min, f_max, peaks_hz: points_hz[1..=n_mels].to_vec() })
    }

    pub fn n_mels(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.cols()
    }

    /// Mel-band energies of one power-spectrum frame.
    pub fn apply(&self, power_frame: &[f64]) -> Vec<f64> {
        self.weights.matvec(power_frame)
    }

    /// Index of the filter whose peak is nearest to `f` Hz.
    pub fn band_of(&self, f: f64) -> usize {
        self.peaks_hz
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - f).abs().partial_cmp(&(b.1 - f).abs()).unwrap())
            .unwrap()
            .0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_anchors() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        let m700 = hz_to_mel(700.0);
        assert!((m700 - 2595.0 * 2f64.log10()).abs() < 1e-9);
        assert!((m700 - 781.17).abs() < 0.01);
        assert!((mel_to_hz(m700) - 700.0).abs() < 1e-9);
    }

    #[test]
    fn rows_are_nonnegative_with_contiguous_support() {
        let fb = MelFilterbank::new(64, 256, 8000, 0.0, 4000.0).unwrap();
        for m in 0..fb.n_mels() {
            let row = fb.weights.row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0);
            let first = row.iter().position(|&w| w > 0.0).unwrap();
            let last = row.iter().rposition(|&w| w > 0.0).unwrap();
            assert!(row[first..=last].iter().all(|&w| w > 0.0), "filter {m} support has holes");
        }
    }

    #[test]
    fn peaks_increase() {
        let fb = MelFilterbank::new(40, 256, 8000, 0.0, 4000.0).unwrap();
        assert!(fb.peaks_hz.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn bins_between_first_and_last_peak_are_covered() {
        let fb = MelFilterbank::new(64, 256, 8000, 0.0, 4000.0).unwrap();
        let bin_hz = 8000.0 / 256.0;
        for k in 0..fb.n_bins() {
            let f = k as f64 * bin_hz;
            if f > fb.peaks_hz[0] && f < *fb.peaks_hz.last().unwrap() {
                let total: f64 = (0..fb.n_mels()).map(|m| fb.weights.get(m, k)).sum();
                assert!(total > 0.0, "bin {k} ({f} Hz) uncovered");
            }
        }
    }

    #[test]
    fn invalid_band_edges() {
        assert!(MelFilterbank::new(10, 256, 8000, 2000.0, 1000.0).is_err());
        assert!(MelFilterbank::new(10, 256, 8000, 0.0, 5000.0).is_err());
        assert!(MelFilterbank::new(1, 256, 8000, 0.0, 4000.0).is_err());
    }
}
