//! Pipeline command line: synthesize a corpus, extract features, train
//! teachers, distill, reconstruct audio, and evaluate.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use audiodistill::audio_io::Manifest;
use audiodistill::config::{Method, RunConfig};
use audiodistill::distill::{load_distilled, save_distilled, DistilledSet};
use audiodistill::features::{
    fit_stats, load_feature_map, save_feature_map, standardize, FeatureMap, FeatureSet, FeatureStats,
};
use audiodistill::harness::{self, EvalReport};
use audiodistill::models::ArchDescriptor;
use audiodistill::reconstruct::reconstruct_clip_traced;
use audiodistill::synth::{write_corpus, CorpusConfig};
use audiodistill::{audio_io, rng};

#[derive(Parser)]
#[command(name = "audiodistill", about = "Distill audio classification datasets into a few synthetic clips per class")]
struct Cli {
    /// JSON run configuration; unset fields fall back to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural tone/chirp corpus with train/test manifests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 120)]
        train_per_class: usize,
        #[arg(long, default_value_t = 40)]
        test_per_class: usize,
        #[arg(long, default_value_t = 4000)]
        clip_len: usize,
    },
    /// Extract fused differential MFCC features for every manifest entry.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        /// Base directory for the manifest's relative paths (defaults to the
        /// manifest's parent).
        #[arg(long)]
        audio_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the teacher models and persist their trajectories.
    Teachers {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a distilled set from features (and a buffer, for trajectory
    /// matching).
    Distill {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        buffer: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        cpc: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert a distilled set back to WAV files.
    Reconstruct {
        #[arg(long)]
        dset: PathBuf,
        /// Feature directory holding stats.json from extraction.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also dump per-clip Griffin-Lim residual histories as CSV.
        #[arg(long)]
        residuals: Option<PathBuf>,
    },
    /// Train students on a distilled set and report test accuracy.
    Eval {
        #[arg(long)]
        dset: PathBuf,
        #[arg(long)]
        test_features: PathBuf,
        /// Evaluation architecture, e.g. convnet-d3-w32 (input dims and
        /// class count come from the data).
        #[arg(long)]
        eval_arch: Option<String>,
        #[arg(long)]
        report_dir: PathBuf,
        #[arg(long, default_value = "report")]
        stem: String,
        #[arg(long, default_value = "dataset")]
        tag: String,
    },
    /// Noise-robustness sweep over reconstructed clips.
    Noise {
        #[arg(long)]
        dset: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        test_features: PathBuf,
        /// Comma-separated noise standard deviations.
        #[arg(long, value_delimiter = ',')]
        sigmas: Vec<f64>,
        #[arg(long)]
        report_dir: PathBuf,
        #[arg(long, default_value = "noise")]
        stem: String,
        #[arg(long, default_value = "dataset")]
        tag: String,
    },
    /// Re-emit CSV/markdown from a saved report JSON.
    Report {
        #[arg(long)]
        rows: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "report")]
        stem: String,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Feature directory layout: NNNNN.fdmf (sorted), stats.json, config.json.
fn load_feature_dir(dir: &Path) -> Result<(Vec<FeatureMap>, FeatureStats, RunConfig)> {
    let config = RunConfig::load(dir.join("config.json"))
        .with_context(|| format!("reading {}/config.json", dir.display()))?;
    let stats = FeatureStats::load(dir.join("stats.json"))?;
    let stft = config.stft()?;
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".fdmf"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no feature files in {}", dir.display());
    }
    let maps = names
        .iter()
        .map(|n| load_feature_map(dir.join(n), stft).map_err(Into::into))
        .collect::<Result<Vec<_>>>()?;
    Ok((maps, stats, config))
}

/// Standardized training view of a feature directory.
fn load_standardized(dir: &Path) -> Result<(FeatureSet, FeatureStats, RunConfig)> {
    let (maps, stats, config) = load_feature_dir(dir)?;
    let std_maps: Vec<FeatureMap> = maps.iter().map(|m| standardize(m, &stats)).collect();
    Ok((FeatureSet::from_maps(&std_maps), stats, config))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = load_config(&cli)?;

    match cli.command {
        Command::Synth { out, classes, train_per_class, test_per_class, clip_len } => {
            let corpus = CorpusConfig {
                n_classes: classes,
                train_per_class,
                test_per_class,
                sample_rate: config.sample_rate,
                clip_len,
                ..CorpusConfig::default()
            };
            let (train_m, test_m) = write_corpus(&corpus, config.seed, &out)?;
            println!(
                "wrote {} train and {} test clips under {}",
                train_m.entries.len(),
                test_m.entries.len(),
                out.display()
            );
        }

        Command::Extract { manifest, audio_dir, out } => {
            let manifest_path = manifest.clone();
            let manifest = Manifest::load(&manifest)?;
            let base = audio_dir
                .or_else(|| manifest_path.parent().map(Path::to_path_buf))
                .unwrap_or_else(|| PathBuf::from("."));
            let mut config = config;
            config.sample_rate = manifest.sample_rate;
            config.target_len = manifest.target_len;
            let clips = manifest.load_clips(&base)?;
            let maps = harness::extract_all(&clips, &config)?;
            let stats = fit_stats(&maps);
            fs::create_dir_all(&out)?;
            for (i, map) in maps.iter().enumerate() {
                save_feature_map(map, out.join(format!("{i:05}.fdmf")))?;
            }
            stats.save(out.join("stats.json"))?;
            config.save(out.join("config.json"))?;
            println!("extracted {} maps ({}x{}) into {}", maps.len(), maps[0].values.rows(), maps[0].values.cols(), out.display());
        }

        Command::Teachers { features, out } => {
            let (train, _stats, config) = load_standardized(&features)?;
            let buffer = harness::build_buffer(&train, &config)?;
            harness::save_buffer(&buffer, &config, &out)?;
            println!(
                "trained {} teachers x {} epochs on {} samples -> {}",
                buffer.trajectories.len(),
                buffer.trajectories[0].len() - 1,
                train.n,
                out.display()
            );
        }

        Command::Distill { features, buffer, method, cpc, out } => {
            let (train, _stats, mut config) = load_standardized(&features)?;
            if let Some(m) = method {
                config.method = m;
            }
            if let Some(c) = cpc {
                config.cpc = c;
            }
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            let buffer = match (config.method, buffer) {
                (Method::Mtt, Some(dir)) => Some(harness::load_buffer(&dir)?.0),
                (Method::Mtt, None) => bail!("--method mtt needs --buffer"),
                _ => None,
            };
            let dset = harness::distill_with_method(&train, buffer.as_ref(), &config)?;
            save_distilled(&dset, &out)?;
            println!(
                "distilled {} clips/class x {} classes (alpha {:.5}) -> {}",
                dset.cpc,
                dset.n_classes,
                dset.alpha,
                out.display()
            );
        }

        Command::Reconstruct { dset, features, out, residuals } => {
            let (_maps, stats, config) = load_feature_dir(&features)?;
            let dset: DistilledSet = load_distilled(&dset)?;
            let recon = config.recon_params()?;
            let stft = config.stft()?;
            fs::create_dir_all(&out)?;
            let mut histories = Vec::with_capacity(dset.n());
            for i in 0..dset.n() {
                let map = FeatureMap {
                    values: audiodistill::mat::Mat::from_vec(
                        dset.rows,
                        dset.cols,
                        dset.sample(i).iter().map(|&v| v as f64).collect(),
                    ),
                    label: dset.labels[i],
                    frame_config: stft,
                };
                let seed = {
                    use audiodistill::rng;
                    use rand_core::RngCore as _;
                    rng::stream(config.seed, 5_000 + i as u64).next_u64()
                };
                let (clip, history) = reconstruct_clip_traced(&map, &stats, &recon, seed)?;
                audio_io::save_wav(&clip, out.join(format!("clip-{i:03}-c{}.wav", clip.label)))?;
                histories.push(history);
            }
            if let Some(path) = residuals {
                harness::write_residuals_csv(&histories, &path)?;
            }
            println!("reconstructed {} clips into {}", dset.n(), out.display());
        }

        Command::Eval { dset, test_features, eval_arch, report_dir, stem, tag } => {
            let (test, _stats, config) = load_standardized(&test_features)?;
            let dset = load_distilled(&dset)?;
            let arch = resolve_arch(eval_arch.as_deref(), &config, &dset, test.n_classes())?;
            let mut report = EvalReport::new(config.clone());
            report.rows.push(harness::evaluate_to_row(
                &tag,
                config.method,
                &dset,
                &arch.canonical(),
                &arch,
                &test,
                &config,
                config.eval_seeds,
                config.eval_epochs,
            )?);
            harness::emit_report(&report, &report_dir, &stem)?;
            fs::write(report_dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&report)?)?;
            let row = &report.rows[0];
            println!(
                "{} on {}: {:.4} +- {:.4} over {} seeds -> {}",
                row.method,
                row.eval_arch,
                row.mean_acc,
                row.std_acc,
                row.seeds,
                report_dir.join(format!("{stem}.csv")).display()
            );
        }

        Command::Noise { dset, features, test_features, sigmas, report_dir, stem, tag } => {
            let (_maps, stats, config) = load_feature_dir(&features)?;
            let (test, _test_stats, _) = load_standardized(&test_features)?;
            let dset = load_distilled(&dset)?;
            let arch = resolve_arch(None, &config, &dset, test.n_classes())?;
            let rows = harness::noise_robustness(&dset, &sigmas, &stats, &test, &arch, &config, &tag)?;
            let mut report = EvalReport::new(config);
            report.rows = rows;
            harness::emit_report(&report, &report_dir, &stem)?;
            fs::write(report_dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&report)?)?;
            for row in &report.rows {
                println!("{}: {:.4} +- {:.4}", row.dataset, row.mean_acc, row.std_acc);
            }
        }

        Command::Report { rows, out, stem } => {
            let report: EvalReport = serde_json::from_str(&fs::read_to_string(&rows)?)?;
            harness::emit_report(&report, &out, &stem)?;
            println!("emitted {} rows to {}", report.rows.len(), out.display());
        }
    }
    Ok(())
}

/// Build the evaluation architecture from a `convnet-dD-wW` shorthand, a
/// full canonical string, or the run configuration.
fn resolve_arch(
    spec: Option<&str>,
    config: &RunConfig,
    dset: &DistilledSet,
    n_classes: usize,
) -> Result<ArchDescriptor> {
    match spec {
        None => Ok(config.arch(dset.rows, dset.cols, n_classes)?),
        Some(s) => {
            if let Ok(full) = s.parse::<ArchDescriptor>() {
                return Ok(full);
            }
            let short = s
                .strip_prefix("convnet-d")
                .and_then(|r| r.split_once("-w"))
                .and_then(|(d, w)| Some((d.parse::<usize>().ok()?, w.parse::<usize>().ok()?)));
            match short {
                Some((depth, width)) => {
                    Ok(ArchDescriptor::new(depth, width, dset.rows, dset.cols, n_classes)?)
                }
                None => bail!("cannot parse architecture {s:?}"),
            }
        }
    }
}
