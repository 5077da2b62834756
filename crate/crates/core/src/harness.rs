//! End-to-end orchestration: teacher buffers, distillation arms, student
//! evaluation, the cross-architecture grid, noise robustness, and report
//! emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::audio_io::{normalize_length, AudioClip};
use crate::config::{Method, RunConfig};
use crate::distill::{
    self, coreset_herding, coreset_random, init_distilled, DcgmOptions, DistilledSet, MttOptions,
    TrajectoryBuffer,
};
use crate::error::{Error, Result};
use crate::features::{
    extract_fd_mfcc, fit_stats, standardize, FeatureMap, FeatureSet, FeatureStats,
};
use crate::models::{self, ArchDescriptor, ParamVector};
use crate::reconstruct::{reconstruct_clip_traced, ReconParams};
use crate::rng;

/// One evaluation outcome: an architecture trained on some arm's data,
/// measured on the held-out test set over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub method: Method,
    pub distill_arch: String,
    pub eval_arch: String,
    pub cpc: usize,
    pub seeds: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
}

/// Append-only result table plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub config: RunConfig,
}

impl EvalReport {
    pub fn new(config: RunConfig) -> Self {
        EvalReport { rows: Vec::new(), config }
    }
}

// ---------------------------------------------------------------------------
// Feature plumbing
// ---------------------------------------------------------------------------

/// Extract maps for a whole clip list (clips must already match the
/// dataset's length/rate contract).
pub fn extract_all(clips: &[AudioClip], config: &RunConfig) -> Result<Vec<FeatureMap>> {
    let params = config.feature_params()?;
    clips.iter().map(|c| extract_fd_mfcc(c, &params)).collect()
}

/// Standardized train/test feature sets plus the training statistics.
pub fn prepare_sets(
    train_clips: &[AudioClip],
    test_clips: &[AudioClip],
    config: &RunConfig,
) -> Result<(FeatureSet, FeatureSet, FeatureStats)> {
    let train_maps = extract_all(train_clips, config)?;
    let test_maps = extract_all(test_clips, config)?;
    let stats = fit_stats(&train_maps);
    let std_train: Vec<FeatureMap> = train_maps.iter().map(|m| standardize(m, &stats)).collect();
    let std_test: Vec<FeatureMap> = test_maps.iter().map(|m| standardize(m, &stats)).collect();
    Ok((FeatureSet::from_maps(&std_train), FeatureSet::from_maps(&std_test), stats))
}

// ---------------------------------------------------------------------------
// Teacher buffer
// ---------------------------------------------------------------------------

/// Train `n_teachers` teachers from distinct derived seeds and collect their
/// per-epoch parameter snapshots.
pub fn build_buffer(train: &FeatureSet, config: &RunConfig) -> Result<TrajectoryBuffer> {
    let arch = config.arch(train.rows, train.cols, train.n_classes())?;
    let mut trajectories = Vec::with_capacity(config.n_teachers);
    for i in 0..config.n_teachers {
        let init_seed = rng::stream(config.seed, 1_000 + i as u64).next_u64();
        let shuffle_seed = rng::stream(config.seed, 2_000 + i as u64).next_u64();
        let init = models::build(&arch, init_seed)?;
        trajectories.push(models::train_epochs(
            &init,
            train,
            config.teacher_epochs,
            config.teacher_lr,
            config.teacher_batch,
            shuffle_seed,
        ));
    }
    TrajectoryBuffer::new(trajectories, config.max_start)
}

/// Persist a buffer as a directory: `config.json` plus one trajectory file
/// per teacher.
pub fn save_buffer(buffer: &TrajectoryBuffer, config: &RunConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    config.save(dir.join("config.json"))?;
    for (i, traj) in buffer.trajectories.iter().enumerate() {
        models::save_trajectory(traj, i as u64, dir.join(format!("teacher_{i:03}.traj")))?;
    }
    Ok(())
}

pub fn load_buffer(dir: impl AsRef<Path>) -> Result<(TrajectoryBuffer, RunConfig)> {
    let dir = dir.as_ref();
    let config = RunConfig::load(dir.join("config.json"))?;
    let mut names: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("teacher_") && n.ends_with(".traj"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::BufferIntegrity(format!("no trajectory files in {}", dir.display())));
    }
    let mut trajectories = Vec::with_capacity(names.len());
    for n in names {
        let (traj, _) = models::load_trajectory(dir.join(n))?;
        trajectories.push(traj);
    }
    Ok((TrajectoryBuffer::new(trajectories, config.max_start)?, config))
}

// ---------------------------------------------------------------------------
// Student evaluation
// ---------------------------------------------------------------------------

/// Train one fresh student on the given data and return its final state.
pub fn train_student(
    data: &FeatureSet,
    arch: &ArchDescriptor,
    lr: f32,
    epochs: usize,
    batch: usize,
    init_seed: u64,
    shuffle_seed: u64,
) -> Result<ParamVector> {
    let init = models::build(arch, init_seed)?;
    let traj = models::train_epochs(&init, data, epochs, lr, batch, shuffle_seed);
    Ok(traj.into_iter().last().expect("training returns at least the init"))
}

/// Per-seed accuracies of students trained on a distilled set (real coresets
/// and the whole set ride through the same container). Training always uses
/// the set's own `alpha` as the fixed learning rate.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_distilled(
    dset: &DistilledSet,
    eval_arch: &ArchDescriptor,
    test: &FeatureSet,
    n_seeds: usize,
    epochs: usize,
    batch: usize,
    seed_base: u64,
) -> Result<Vec<f64>> {
    assert!(n_seeds >= 1, "need at least one evaluation seed");
    let data = dset.to_feature_set();
    let mut accs = Vec::with_capacity(n_seeds);
    for s in 0..n_seeds {
        let init_seed = rng::stream(seed_base, 3_000 + s as u64).next_u64();
        let shuffle_seed = rng::stream(seed_base, 4_000 + s as u64).next_u64();
        let student =
            train_student(&data, eval_arch, dset.alpha, epochs, batch.min(data.n.max(1)), init_seed, shuffle_seed)?;
        accs.push(models::accuracy(&student, test, 64));
    }
    Ok(accs)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Convenience: evaluate and wrap into a report row.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_to_row(
    dataset: &str,
    method: Method,
    dset: &DistilledSet,
    distill_arch: &str,
    eval_arch: &ArchDescriptor,
    test: &FeatureSet,
    config: &RunConfig,
    n_seeds: usize,
    epochs: usize,
) -> Result<EvalRow> {
    let accs = evaluate_distilled(dset, eval_arch, test, n_seeds, epochs, config.eval_batch, config.seed)?;
    let (mean_acc, std_acc) = mean_std(&accs);
    Ok(EvalRow {
        dataset: dataset.to_string(),
        method,
        distill_arch: distill_arch.to_string(),
        eval_arch: eval_arch.canonical(),
        cpc: dset.cpc,
        seeds: n_seeds,
        mean_acc,
        std_acc,
    })
}

/// Full grid: every distilled set (keyed by its distillation architecture)
/// evaluated on every evaluation architecture.
pub fn cross_arch_matrix(
    dsets: &BTreeMap<String, DistilledSet>,
    eval_archs: &[ArchDescriptor],
    test: &FeatureSet,
    config: &RunConfig,
    dataset_tag: &str,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::with_capacity(dsets.len() * eval_archs.len());
    for (distill_arch, dset) in dsets {
        for eval_arch in eval_archs {
            rows.push(evaluate_to_row(
                dataset_tag,
                Method::Mtt,
                dset,
                distill_arch,
                eval_arch,
                test,
                config,
                config.eval_seeds,
                config.eval_epochs,
            )?);
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Reconstruction round trip and noise robustness
// ---------------------------------------------------------------------------

/// Reconstruct every distilled clip, optionally perturb with white noise,
/// re-extract features, and re-standardize with the dataset statistics.
pub fn reextract_distilled(
    dset: &DistilledSet,
    stats: &FeatureStats,
    config: &RunConfig,
    noise_std: f64,
    noise_stream: u64,
) -> Result<DistilledSet> {
    let params = config.feature_params()?;
    let recon: ReconParams = config.recon_params()?;
    let stft = config.stft()?;
    let sz = dset.sample_size();
    let mut features = Vec::with_capacity(dset.features.len());
    for i in 0..dset.n() {
        let map = FeatureMap {
            values: crate::mat::Mat::from_vec(
                dset.rows,
                dset.cols,
                dset.sample(i).iter().map(|&v| v as f64).collect(),
            ),
            label: dset.labels[i],
            frame_config: stft,
        };
        let gla_seed = rng::stream(config.seed, 5_000 + i as u64).next_u64();
        let (clip, _) = reconstruct_clip_traced(&map, stats, &recon, gla_seed)?;
        let mut clip = normalize_length(&clip, config.target_len);
        if noise_std > 0.0 {
            let mut nr = rng::stream(config.seed, noise_stream + i as u64);
            for s in clip.samples.iter_mut() {
                *s = (*s + noise_std * rng::normal(&mut nr)).clamp(-1.0, 1.0);
            }
        }
        let remap = extract_fd_mfcc(&clip, &params)?;
        let remap = standardize(&remap, stats);
        debug_assert_eq!(remap.values.rows(), dset.rows);
        let cols = remap.values.cols().min(dset.cols);
        let mut flat = vec![0.0f32; sz];
        for r in 0..dset.rows {
            for t in 0..cols {
                flat[r * dset.cols + t] = remap.values.get(r, t) as f32;
            }
        }
        features.extend_from_slice(&flat);
    }
    Ok(DistilledSet { features, ..dset.clone() })
}

/// Noise-robustness sweep: reconstruct, add zero-mean white noise at each
/// sigma, re-extract, retrain, and report one row per sigma. The evaluation
/// seeds are shared across sigmas so the sigma = 0 row doubles as the
/// reconstruct-then-retrain baseline.
#[allow(clippy::too_many_arguments)]
pub fn noise_robustness(
    dset: &DistilledSet,
    sigmas: &[f64],
    stats: &FeatureStats,
    test: &FeatureSet,
    eval_arch: &ArchDescriptor,
    config: &RunConfig,
    dataset_tag: &str,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::with_capacity(sigmas.len());
    for (si, &sigma) in sigmas.iter().enumerate() {
        let noisy = reextract_distilled(dset, stats, config, sigma, 7_000 + 10_000 * si as u64)?;
        let row = evaluate_to_row(
            &format!("{dataset_tag}+noise{sigma}"),
            Method::Mtt,
            &noisy,
            &eval_arch.canonical(),
            eval_arch,
            test,
            config,
            config.eval_seeds,
            config.eval_epochs,
        )?;
        rows.push(row);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

/// CSV with a fixed header; one line per row.
pub fn write_report_csv(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("dataset,method,distill_arch,eval_arch,cpc,seeds,mean_acc,std_acc\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6}\n",
            r.dataset, r.method, r.distill_arch, r.eval_arch, r.cpc, r.seeds, r.mean_acc, r.std_acc
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Markdown table in the fixed column order.
pub fn write_report_markdown(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("| dataset | method | distill_arch | eval_arch | cpc | mean | std |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for r in &report.rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.4} | {:.4} |\n",
            r.dataset, r.method, r.distill_arch, r.eval_arch, r.cpc, r.mean_acc, r.std_acc
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Emit csv + markdown + the embedded config next to each other.
pub fn emit_report(report: &EvalReport, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    if report.rows.is_empty() {
        return Err(Error::parameter("refusing to emit an empty report".to_string()));
    }
    write_report_csv(report, dir.join(format!("{stem}.csv")))?;
    write_report_markdown(report, dir.join(format!("{stem}.md")))?;
    report.config.save(dir.join(format!("{stem}.config.json")))?;
    Ok(())
}

/// Griffin-Lim residual histories as CSV (`clip,iter,residual`).
pub fn write_residuals_csv(histories: &[Vec<f64>], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("clip,iter,residual\n");
    for (ci, h) in histories.iter().enumerate() {
        for (it, r) in h.iter().enumerate() {
            out.push_str(&format!("{ci},{},{r:.8}\n", it + 1));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// One-call pipeline
// ---------------------------------------------------------------------------

pub struct PipelineOutput {
    pub report: EvalReport,
    pub distilled: DistilledSet,
    pub stats: FeatureStats,
}

/// Build a distilled set with the configured method from already-standardized
/// feature sets.
pub fn distill_with_method(
    train: &FeatureSet,
    buffer: Option<&TrajectoryBuffer>,
    config: &RunConfig,
) -> Result<DistilledSet> {
    let provenance: serde_json::Value = serde_json::from_str(&config.canonical())?;
    let arch = config.arch(train.rows, train.cols, train.n_classes())?;
    match config.method {
        Method::Mtt => {
            let buffer = buffer
                .ok_or_else(|| Error::parameter("trajectory matching needs a teacher buffer".to_string()))?;
            let init = init_distilled(
                train,
                config.cpc,
                config.alpha_init,
                config.init,
                config.seed,
                provenance,
            )?;
            let opts = MttOptions {
                outer_iters: config.outer_iters,
                inner_steps: config.inner_steps,
                target_steps: config.target_steps,
                max_start: config.max_start,
                outer_lr: config.outer_lr,
                inner_batch: config.inner_batch,
                seed: config.seed,
            };
            distill::mtt_distill(buffer, init, &opts)
        }
        Method::Dcgm => {
            let init = init_distilled(
                train,
                config.cpc,
                config.alpha_init,
                config.init,
                config.seed,
                provenance,
            )?;
            let opts = DcgmOptions {
                iters: config.outer_iters,
                real_batch: config.dcgm_real_batch,
                model_lr: config.dcgm_model_lr,
                outer_lr: config.outer_lr,
                reinit_every: config.dcgm_reinit_every,
                seed: config.seed,
            };
            distill::dcgm_distill(train, init, &arch, &opts)
        }
        Method::Random => {
            let idx = coreset_random(train, config.cpc, config.seed)?;
            Ok(DistilledSet::from_subset(train, &idx, config.eval_lr, provenance))
        }
        Method::Herding => {
            let idx = coreset_herding(train, config.cpc)?;
            Ok(DistilledSet::from_subset(train, &idx, config.eval_lr, provenance))
        }
        Method::Whole => {
            let idx: Vec<usize> = (0..train.n).collect();
            Ok(DistilledSet::from_subset(train, &idx, config.eval_lr, provenance))
        }
    }
}

/// Extract, build teachers (when needed), distill, and evaluate — one
/// deterministic pass from clips to a report.
pub fn run_pipeline(
    train_clips: &[AudioClip],
    test_clips: &[AudioClip],
    config: &RunConfig,
    dataset_tag: &str,
) -> Result<PipelineOutput> {
    let (train, test, stats) = prepare_sets(train_clips, test_clips, config)?;
    let arch = config.arch(train.rows, train.cols, train.n_classes())?;
    let buffer = match config.method {
        Method::Mtt => Some(build_buffer(&train, config)?),
        _ => None,
    };
    let distilled = distill_with_method(&train, buffer.as_ref(), config)?;
    let mut report = EvalReport::new(config.clone());
    report.rows.push(evaluate_to_row(
        dataset_tag,
        config.method,
        &distilled,
        &arch.canonical(),
        &arch,
        &test,
        config,
        config.eval_seeds,
        config.eval_epochs,
    )?);
    Ok(PipelineOutput { report, distilled, stats })
}
