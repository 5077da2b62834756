//! Distillation toolkit for audio classification datasets.
//!
//! The pipeline: load fixed-rate clips ([`audio_io`]), extract fused
//! differential MFCC feature maps ([`features`]), train teacher models and
//! record their parameter trajectories ([`models`]), optimize a small
//! synthetic feature set against those trajectories ([`distill`]),
//! reconstruct audible waveforms from the synthetic features via Griffin-Lim
//! ([`reconstruct`]), and evaluate students trained on the result
//! ([`harness`]).

pub mod audio_io;
pub mod autodiff;
pub mod config;
pub mod distill;
pub mod dsp;
pub mod error;
pub mod features;
pub mod harness;
pub mod mat;
pub mod models;
pub mod reconstruct;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use mat::Mat;
