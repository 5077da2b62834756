//! Fused differential MFCC extraction.
//!
//! A clip maps to a `3C x T` feature matrix: `C` cepstral coefficients per
//! frame stacked with their first- and second-order differences, in fixed
//! `[MFCC; delta; delta2]` row order. The difference operator is a forward
//! difference halved, with the last column replicated (so it lands at zero):
//!
//! `delta[:, t] = (m[:, t+1] - m[:, t]) / 2`
//!
//! Dataset-level standardization (per-row mean/std over all training frames)
//! lives here too, since distillation and evaluation both consume
//! standardized maps.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio_io::AudioClip;
use crate::dsp::{self, MelFilterbank, StftConfig};
use crate::error::{Error, Result};
use crate::mat::Mat;

/// Everything the extractor needs besides the clip itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    pub stft: StftConfig,
    pub sample_rate: u32,
    pub n_mels: usize,
    /// Cepstral coefficients kept per frame (`C`); must be <= `n_mels`.
    pub n_coef: usize,
    pub pre_emphasis: f64,
    pub f_min: f64,
    /// Upper band edge; `None` means the Nyquist frequency.
    pub f_max: Option<f64>,
}

impl FeatureParams {
    pub fn f_max_hz(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn filterbank(&self) -> Result<MelFilterbank> {
        MelFilterbank::new(self.n_mels, self.stft.fft_len, self.sample_rate, self.f_min, self.f_max_hz())
    }
}

/// One extracted feature map: `3C` rows by `T` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Mat,
    pub label: u32,
    pub frame_config: StftConfig,
}

impl FeatureMap {
    /// Cepstral coefficient count `C` (a third of the row count).
    pub fn n_coef(&self) -> usize {
        self.values.rows() / 3
    }

    pub fn n_frames(&self) -> usize {
        self.values.cols()
    }
}

/// dB-scaled mel spectrogram (`n_mels x T`), the pre-DCT pipeline stage.
pub fn log_mel_spectrogram(clip: &AudioClip, params: &FeatureParams) -> Result<Mat> {
    if clip.sample_rate != params.sample_rate {
        return Err(Error::parameter(format!(
            "clip rate {} != extractor rate {}",
            clip.sample_rate, params.sample_rate
        )));
    }
    let fb = params.filterbank()?;
    let emphasized = dsp::pre_emphasis(&clip.samples, params.pre_emphasis);
    let spec = dsp::stft(&emphasized, &params.stft)?;
    let n_bins = spec.n_bins();

    let mut out = Mat::zeros(params.n_mels, spec.n_frames);
    let mut power = vec![0.0f64; n_bins];
    for t in 0..spec.n_frames {
        for (k, p) in power.iter_mut().enumerate() {
            *p = spec.get(k, t).norm_sqr();
        }
        let mel = fb.apply(&power);
        for (m, &e) in mel.iter().enumerate() {
            out.set(m, t, dsp::power_to_db(e, 1.0));
        }
    }
    Ok(out)
}

/// Plain MFCC matrix (`C x T`): per-frame orthonormal DCT of the dB mel
/// spectrogram, truncated to the first `n_coef` coefficients.
pub fn mfcc(clip: &AudioClip, params: &FeatureParams) -> Result<Mat> {
    if params.n_coef > params.n_mels {
        return Err(Error::parameter(format!(
            "n_coef {} > n_mels {}",
            params.n_coef, params.n_mels
        )));
    }
    let log_mel = log_mel_spectrogram(clip, params)?;
    let mut out = Mat::zeros(params.n_coef, log_mel.cols());
    for t in 0..log_mel.cols() {
        let coefs = dsp::dct2_ortho(&log_mel.col(t));
        for c in 0..params.n_coef {
            out.set(c, t, coefs[c]);
        }
    }
    Ok(out)
}

/// Halved forward difference along time; the last column replicates its
/// neighbor and therefore differences to zero.
pub fn delta(m: &Mat) -> Mat {
    let t_len = m.cols();
    Mat::from_fn(m.rows(), t_len, |r, t| {
        if t + 1 < t_len {
            (m.get(r, t + 1) - m.get(r, t)) / 2.0
        } else {
            0.0
        }
    })
}

/// Full fused extraction: MFCC stacked with its first and second differences.
pub fn extract_fd_mfcc(clip: &AudioClip, params: &FeatureParams) -> Result<FeatureMap> {
    let m = mfcc(clip, params)?;
    let d1 = delta(&m);
    let d2 = delta(&d1);
    Ok(FeatureMap {
        values: Mat::vstack(&[&m, &d1, &d2]),
        label: clip.label,
        frame_config: params.stft,
    })
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

/// Per-row mean and standard deviation over a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Population standard deviation, floored at 1e-6.
    pub std: Vec<f64>,
}

pub fn fit_stats(maps: &[FeatureMap]) -> FeatureStats {
    assert!(!maps.is_empty(), "fit_stats on empty collection");
    let rows = maps[0].values.rows();
    let mut sum = vec![0.0f64; rows];
    let mut sum_sq = vec![0.0f64; rows];
    let mut count = 0usize;
    for map in maps {
        assert_eq!(map.values.rows(), rows, "inconsistent row counts");
        count += map.values.cols();
        for r in 0..rows {
            for &v in map.values.row(r) {
                sum[r] += v;
                sum_sq[r] += v * v;
            }
        }
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| ((sq / n - m * m).max(0.0)).sqrt().max(1e-6))
        .collect();
    FeatureStats { mean, std }
}

pub fn standardize(map: &FeatureMap, stats: &FeatureStats) -> FeatureMap {
    transform(map, stats, |v, m, s| (v - m) / s)
}

/// Exact inverse of [`standardize`].
pub fn destandardize(map: &FeatureMap, stats: &FeatureStats) -> FeatureMap {
    transform(map, stats, |v, m, s| v * s + m)
}

fn transform(map: &FeatureMap, stats: &FeatureStats, f: impl Fn(f64, f64, f64) -> f64) -> FeatureMap {
    assert_eq!(map.values.rows(), stats.mean.len(), "stats dimension mismatch");
    let values = Mat::from_fn(map.values.rows(), map.values.cols(), |r, t| {
        f(map.values.get(r, t), stats.mean[r], stats.std[r])
    });
    FeatureMap { values, ..map.clone() }
}

impl FeatureStats {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

// ---------------------------------------------------------------------------
// Feature tensor file ("FDMF")
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"FDMF";
const VERSION: u16 = 1;

/// Write a map as magic, version, dims, label, then row-major little-endian
/// float-32 payload.
pub fn save_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(18 + map.values.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(map.values.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(map.values.cols() as u32).to_le_bytes());
    out.extend_from_slice(&map.label.to_le_bytes());
    for &v in map.values.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Read a feature file back. The frame geometry is not part of the format,
/// so the caller supplies the dataset-wide [`StftConfig`].
pub fn load_feature_map(path: impl AsRef<Path>, frame_config: StftConfig) -> Result<FeatureMap> {
    let buf = fs::read(path)?;
    if buf.len() < 18 || &buf[0..4] != MAGIC {
        return Err(Error::format("not a feature tensor file"));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(Error::Unsupported(format!("feature file version {version}")));
    }
    let rows = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
    let label = u32::from_le_bytes(buf[14..18].try_into().unwrap());
    let expected = 18 + rows * cols * 4;
    if buf.len() != expected {
        return Err(Error::format(format!(
            "feature payload is {} bytes, expected {}",
            buf.len() - 18,
            expected - 18
        )));
    }
    let data: Vec<f64> = buf[18..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(FeatureMap { values: Mat::from_vec(rows, cols, data), label, frame_config })
}

// ---------------------------------------------------------------------------
// Flat f32 view for training
// ---------------------------------------------------------------------------

/// Feature maps flattened to `f32` for model training: `n` samples of
/// `rows x cols`, stored contiguously sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub labels: Vec<u32>,
}

impl FeatureSet {
    pub fn from_maps(maps: &[FeatureMap]) -> Self {
        assert!(!maps.is_empty());
        let rows = maps[0].values.rows();
        let cols = maps[0].values.cols();
        let mut data = Vec::with_capacity(maps.len() * rows * cols);
        let mut labels = Vec::with_capacity(maps.len());
        for m in maps {
            assert_eq!((m.values.rows(), m.values.cols()), (rows, cols), "ragged feature set");
            data.extend(m.values.data().iter().map(|&v| v as f32));
            labels.push(m.label);
        }
        FeatureSet { n: maps.len(), rows, cols, data, labels }
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let sz = self.rows * self.cols;
        &self.data[i * sz..(i + 1) * sz]
    }

    pub fn sample_size(&self) -> usize {
        self.rows * self.cols
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    /// Indices of every sample of class `c`, in dataset order.
    pub fn class_indices(&self, c: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == c).then_some(i))
            .collect()
    }

    /// Gather a subset into a new set.
    pub fn subset(&self, indices: &[usize]) -> FeatureSet {
        let sz = self.sample_size();
        let mut data = Vec::with_capacity(indices.len() * sz);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        FeatureSet { n: indices.len(), rows: self.rows, cols: self.cols, data, labels }
    }
}
