//! Deterministic signal-processing kernels shared by feature extraction and
//! reconstruction. All kernels are pure functions over `f64` buffers.

mod dct;
mod mel;
mod stft;

pub use dct::{dct2_ortho, idct};
pub use mel::{hz_to_mel, mel_to_hz, MelFilterbank};
pub use stft::{istft, stft, Spectrogram};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Power floor applied before taking logs: -100 dB relative to the reference.
pub const DB_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    Hamming,
}

impl Window {
    /// Symmetric window values of the given length.
    pub fn values(self, len: usize) -> Vec<f64> {
        if len == 1 {
            return vec![1.0];
        }
        let denom = (len - 1) as f64;
        (0..len)
            .map(|n| {
                let c = (std::f64::consts::TAU * n as f64 / denom).cos();
                match self {
                    Window::Hann => 0.5 * (1.0 - c),
                    Window::Hamming => 0.54 - 0.46 * c,
                }
            })
            .collect()
    }
}

/// Short-time transform geometry. `fft_len` must be a power of two and at
/// least `frame_len`; frames are zero-padded up to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop_len: usize,
    pub fft_len: usize,
    pub window: Window,
}

impl StftConfig {
    pub fn new(frame_len: usize, hop_len: usize, fft_len: usize, window: Window) -> Result<Self> {
        if hop_len == 0 || hop_len > frame_len || frame_len > fft_len {
            return Err(Error::parameter(format!(
                "need 0 < hop ({hop_len}) <= frame ({frame_len}) <= fft ({fft_len})"
            )));
        }
        if !fft_len.is_power_of_two() {
            return Err(Error::parameter(format!("fft_len {fft_len} is not a power of two")));
        }
        Ok(StftConfig { frame_len, hop_len, fft_len, window })
    }

    pub fn n_bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Frame count for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> Result<usize> {
        if len < self.frame_len {
            return Err(Error::TooShort(format!(
                "signal of {len} samples is shorter than one frame ({})",
                self.frame_len
            )));
        }
        Ok((len - self.frame_len) / self.hop_len + 1)
    }

    /// Samples produced by the inverse transform of `n_frames` frames.
    pub fn output_len(&self, n_frames: usize) -> usize {
        (n_frames - 1) * self.hop_len + self.frame_len
    }
}

/// First-order high-pass filter `y[t] = x[t] - coeff * x[t-1]` (with
/// `y[0] = x[0]`), compensating the spectral tilt of natural signals.
pub fn pre_emphasis(x: &[f64], coeff: f64) -> Vec<f64> {
    assert!((0.0..1.0).contains(&coeff), "pre-emphasis coeff {coeff} outside [0, 1)");
    let mut y = Vec::with_capacity(x.len());
    let mut prev = 0.0;
    for (t, &v) in x.iter().enumerate() {
        y.push(if t == 0 { v } else { v - coeff * prev });
        prev = v;
    }
    y
}

/// Slice a signal into hopped frames and apply the window. Returns a
/// `T x frame_len` matrix.
pub fn frame_and_window(x: &[f64], cfg: &StftConfig) -> Result<Mat> {
    let t_frames = cfg.n_frames(x.len())?;
    let w = cfg.window.values(cfg.frame_len);
    let mut out = Mat::zeros(t_frames, cfg.frame_len);
    for t in 0..t_frames {
        let start = t * cfg.hop_len;
        let row = out.row_mut(t);
        for (i, (r, &wv)) in row.iter_mut().zip(&w).enumerate() {
            *r = x[start + i] * wv;
        }
    }
    Ok(out)
}

/// `10 * log10(max(p, floor) / reference)`.
pub fn power_to_db(p: f64, reference: f64) -> f64 {
    assert!(reference > 0.0, "dB reference must be positive");
    10.0 * (p.max(DB_FLOOR) / reference).log10()
}

/// `reference * 10^(d / 10)`; inverse of [`power_to_db`] above the floor.
pub fn db_to_power(d: f64, reference: f64) -> f64 {
    assert!(reference > 0.0, "dB reference must be positive");
    reference * 10f64.powf(d / 10.0)
}
