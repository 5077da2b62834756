//! Procedural tone/chirp corpus for desk-scale experiments.
//!
//! Classes occupy adjacent log-spaced fundamental-frequency bands. Within a
//! class, clips vary in fundamental, chirp rate, harmonic content, envelope,
//! amplitude, and background noise, so a small random subset of a class
//! underrepresents it — the property the distillation comparison needs.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_io::{save_wav, AudioClip, Manifest};
use crate::error::Result;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub sample_rate: u32,
    pub clip_len: usize,
    /// Lower edge of the first class band, Hz.
    pub f_lo: f64,
    /// Upper edge of the last class band, Hz.
    pub f_hi: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_classes: 4,
            train_per_class: 120,
            test_per_class: 40,
            sample_rate: 8000,
            clip_len: 4000,
            f_lo: 250.0,
            f_hi: 2600.0,
        }
    }
}

impl CorpusConfig {
    /// Fundamental band of one class: log-spaced slices of `[f_lo, f_hi]`.
    pub fn class_band(&self, class: usize) -> (f64, f64) {
        let ratio = (self.f_hi / self.f_lo).powf(1.0 / self.n_classes as f64);
        let lo = self.f_lo * ratio.powi(class as i32);
        (lo, lo * ratio)
    }
}

fn synth_clip(cfg: &CorpusConfig, class: usize, r: &mut ChaCha8Rng, source_id: String) -> AudioClip {
    let (f_band_lo, f_band_hi) = cfg.class_band(class);
    let f0 = f_band_lo * (f_band_hi / f_band_lo).powf(rng::uniform(r));
    let chirp = rng::uniform_in(r, -0.12, 0.12); // relative drift over the clip
    let amp = rng::uniform_in(r, 0.25, 0.7);
    let h2 = rng::uniform_in(r, 0.05, 0.4);
    let h3 = rng::uniform_in(r, 0.0, 0.25);
    let noise_std = rng::uniform_in(r, 0.002, 0.035);
    let attack = rng::uniform_in(r, 0.02, 0.2);
    let tail = rng::uniform_in(r, 0.35, 1.0);
    let phase0 = rng::uniform_in(r, 0.0, TAU);

    let n = cfg.clip_len;
    let sr = cfg.sample_rate as f64;
    let mut phase = phase0;
    let mut samples = Vec::with_capacity(n);
    for t in 0..n {
        let frac = t as f64 / n as f64;
        let f = f0 * (1.0 + chirp * frac);
        phase += TAU * f / sr;
        let tone = phase.sin() + h2 * (2.0 * phase).sin() + h3 * (3.0 * phase).sin();
        let env = if frac < attack {
            frac / attack
        } else {
            1.0 - (1.0 - tail) * (frac - attack) / (1.0 - attack)
        };
        let v = amp * env * tone / (1.0 + h2 + h3) + noise_std * rng::normal(r);
        samples.push(v.clamp(-1.0, 1.0));
    }
    AudioClip::new(samples, cfg.sample_rate, class as u32, source_id)
}

/// Deterministic train/test split. Clips interleave classes
/// (`0,1,..,K-1,0,1,..`) so any prefix is roughly balanced.
pub fn generate_corpus(cfg: &CorpusConfig, seed: u64) -> (Vec<AudioClip>, Vec<AudioClip>) {
    let make = |per_class: usize, split: u64| -> Vec<AudioClip> {
        let mut clips = Vec::with_capacity(per_class * cfg.n_classes);
        for i in 0..per_class {
            for class in 0..cfg.n_classes {
                let stream_id = split.wrapping_mul(1 << 32) + (i * cfg.n_classes + class) as u64;
                let mut r = rng::stream(seed, stream_id);
                let id = format!("synth/{}/c{class}-{i:04}", if split == 1 { "train" } else { "test" });
                clips.push(synth_clip(cfg, class, &mut r, id));
            }
        }
        clips
    };
    (make(cfg.train_per_class, 1), make(cfg.test_per_class, 2))
}

pub fn class_names(cfg: &CorpusConfig) -> Vec<String> {
    (0..cfg.n_classes)
        .map(|c| {
            let (lo, hi) = cfg.class_band(c);
            format!("band-{:.0}-{:.0}hz", lo, hi)
        })
        .collect()
}

/// Write the corpus as WAV files with train/test manifests.
pub fn write_corpus(cfg: &CorpusConfig, seed: u64, dir: impl AsRef<Path>) -> Result<(Manifest, Manifest)> {
    let dir = dir.as_ref();
    let (train, test) = generate_corpus(cfg, seed);
    let names = class_names(cfg);
    let mut manifests = Vec::new();
    for (split, clips) in [("train", &train), ("test", &test)] {
        fs::create_dir_all(dir.join(split))?;
        let mut entries = Vec::with_capacity(clips.len());
        for (i, clip) in clips.iter().enumerate() {
            let rel = format!("{split}/clip-{i:04}-c{}.wav", clip.label);
            save_wav(clip, dir.join(&rel))?;
            entries.push((rel, clip.label));
        }
        let manifest = Manifest {
            entries,
            class_names: names.clone(),
            sample_rate: cfg.sample_rate,
            target_len: cfg.clip_len,
        };
        manifest.save(dir.join(format!("{split}.jsonl")))?;
        manifests.push(manifest);
    }
    let test_m = manifests.pop().unwrap();
    let train_m = manifests.pop().unwrap();
    Ok((train_m, test_m))
}
