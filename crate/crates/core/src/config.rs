//! Run configuration: every knob of every stage, serialized canonically and
//! embedded in every artifact so runs are reproducible from their outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{StftConfig, Window};
use crate::error::Result;
use crate::features::FeatureParams;
use crate::models::ArchDescriptor;
use crate::reconstruct::ReconParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mtt,
    Dcgm,
    Random,
    Herding,
    Whole,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Mtt => "mtt",
            Method::Dcgm => "dcgm",
            Method::Random => "random",
            Method::Herding => "herding",
            Method::Whole => "whole",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mtt" => Ok(Method::Mtt),
            "dcgm" => Ok(Method::Dcgm),
            "random" => Ok(Method::Random),
            "herding" => Ok(Method::Herding),
            "whole" => Ok(Method::Whole),
            other => Err(crate::Error::parameter(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    /// Seed the synthetic set with real samples drawn per class.
    Real,
    /// Standard-normal noise.
    Noise,
}

/// All knobs of the pipeline. `Default` is the desk-scale configuration:
/// every arm finishes in minutes on one CPU core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    // dataset contract
    pub sample_rate: u32,
    pub target_len: usize,

    // feature extraction
    pub frame_len: usize,
    pub hop_len: usize,
    pub fft_len: usize,
    pub n_mels: usize,
    pub n_coef: usize,
    pub pre_emphasis: f64,
    pub f_min: f64,
    pub f_max: Option<f64>,

    // architecture used for distillation
    pub depth: usize,
    pub width: usize,

    // teacher training
    pub n_teachers: usize,
    pub teacher_epochs: usize,
    pub teacher_lr: f32,
    pub teacher_batch: usize,

    // distillation
    pub method: Method,
    pub cpc: usize,
    pub outer_iters: usize,
    pub inner_steps: usize,
    pub target_steps: usize,
    pub max_start: usize,
    pub outer_lr: f32,
    pub alpha_init: f32,
    pub init: InitKind,
    pub inner_batch: Option<usize>,
    pub dcgm_real_batch: usize,
    pub dcgm_model_lr: f32,
    pub dcgm_reinit_every: usize,

    // reconstruction
    pub gla_iters: usize,
    pub nnls_iters: usize,
    pub gla_momentum: f64,

    // evaluation
    pub eval_epochs: usize,
    pub eval_seeds: usize,
    pub eval_lr: f32,
    pub eval_batch: usize,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sample_rate: 8000,
            target_len: 8000,
            frame_len: 160, // 20 ms at 8 kHz
            hop_len: 80,    // 10 ms
            fft_len: 256,
            n_mels: 64,
            n_coef: 20,
            pre_emphasis: 0.97,
            f_min: 0.0,
            f_max: None,
            depth: 3,
            width: 32,
            n_teachers: 3,
            teacher_epochs: 20,
            teacher_lr: 0.01,
            teacher_batch: 32,
            method: Method::Mtt,
            cpc: 10,
            outer_iters: 500,
            inner_steps: 10,
            target_steps: 2,
            max_start: 10,
            outer_lr: 0.01,
            alpha_init: 0.01,
            init: InitKind::Real,
            inner_batch: None,
            dcgm_real_batch: 32,
            dcgm_model_lr: 0.01,
            dcgm_reinit_every: 10,
            gla_iters: 60,
            nnls_iters: 200,
            gla_momentum: 0.9,
            eval_epochs: 100,
            eval_seeds: 5,
            eval_lr: 0.01,
            eval_batch: 64,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Canonical single-line serialization; the embedding used by artifacts.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn stft(&self) -> Result<StftConfig> {
        StftConfig::new(self.frame_len, self.hop_len, self.fft_len, Window::Hamming)
    }

    pub fn feature_params(&self) -> Result<FeatureParams> {
        Ok(FeatureParams {
            stft: self.stft()?,
            sample_rate: self.sample_rate,
            n_mels: self.n_mels,
            n_coef: self.n_coef,
            pre_emphasis: self.pre_emphasis,
            f_min: self.f_min,
            f_max: self.f_max,
        })
    }

    pub fn recon_params(&self) -> Result<ReconParams> {
        let mut r = ReconParams::matching(&self.feature_params()?, self.gla_iters);
        r.nnls_iters = self.nnls_iters;
        r.gla_momentum = self.gla_momentum;
        Ok(r)
    }

    /// Distillation architecture over `rows x cols` features and `k` classes.
    pub fn arch(&self, rows: usize, cols: usize, k: usize) -> Result<ArchDescriptor> {
        ArchDescriptor::new(self.depth, self.width, rows, cols, k)
    }
}
