//! Short-time Fourier transform and weighted overlap-add inverse.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{frame_and_window, StftConfig};
use crate::error::Result;
use crate::mat::Mat;

/// Complex half-spectrum per frame: `fft_len/2 + 1` bins by `n_frames`
/// columns, stored frame-major (`data[frame * n_bins + bin]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub config: StftConfig,
    pub n_frames: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn zeros(config: StftConfig, n_frames: usize) -> Self {
        let data = vec![Complex64::default(); config.n_bins() * n_frames];
        Spectrogram { config, n_frames, data }
    }

    pub fn n_bins(&self) -> usize {
        self.config.n_bins()
    }

    #[inline]
    pub fn get(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[frame * self.n_bins() + bin]
    }

    #[inline]
    pub fn set(&mut self, bin: usize, frame: usize, v: Complex64) {
        let nb = self.n_bins();
        self.data[frame * nb + bin] = v;
    }

    /// Magnitudes as an `n_bins x n_frames` matrix.
    pub fn magnitude(&self) -> Mat {
        let nb = self.n_bins();
        Mat::from_fn(nb, self.n_frames, |k, t| self.data[t * nb + k].norm())
    }
}

/// Forward transform: window each frame, zero-pad to `fft_len`, and keep the
/// non-negative-frequency bins.
pub fn stft(x: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    let frames = frame_and_window(x, cfg)?;
    let n_frames = frames.rows();
    let n_bins = cfg.n_bins();

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(cfg.fft_len);
    let mut spec = Spectrogram::zeros(*cfg, n_frames);
    let mut buf = vec![Complex64::default(); cfg.fft_len];
    for t in 0..n_frames {
        buf.fill(Complex64::default());
        for (b, &v) in buf.iter_mut().zip(frames.row(t)) {
            b.re = v;
        }
        fft.process(&mut buf);
        spec.data[t * n_bins..(t + 1) * n_bins].copy_from_slice(&buf[..n_bins]);
    }
    Ok(spec)
}

/// Weighted overlap-add inverse with window-sum normalization.
///
/// For a consistent spectrogram (one produced by [`stft`]) the output equals
/// the original signal wherever the accumulated squared window is above
/// 1e-8; samples below that threshold are left at zero.
pub fn istft(spec: &Spectrogram) -> Vec<f64> {
    let cfg = &spec.config;
    let n_bins = spec.n_bins();
    let w = cfg.window.values(cfg.frame_len);
    let out_len = cfg.output_len(spec.n_frames.max(1));
    let mut acc = vec![0.0f64; out_len];
    let mut wsum = vec![0.0f64; out_len];

    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(cfg.fft_len);
    let mut buf = vec![Complex64::default(); cfg.fft_len];
    let scale = 1.0 / cfg.fft_len as f64;

    for t in 0..spec.n_frames {
        let frame = &spec.data[t * n_bins..(t + 1) * n_bins];
        buf[..n_bins].copy_from_slice(frame);
        // rebuild the negative frequencies by conjugate symmetry
        for k in n_bins..cfg.fft_len {
            buf[k] = frame[cfg.fft_len - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop_len;
        for i in 0..cfg.frame_len {
            let v = buf[i].re * scale;
            acc[start + i] += v * w[i];
            wsum[start + i] += w[i] * w[i];
        }
    }

    for (a, &s) in acc.iter_mut().zip(&wsum) {
        if s >= 1e-8 {
            *a /= s;
        } else {
            *a = 0.0;
        }
    }
    acc
}
