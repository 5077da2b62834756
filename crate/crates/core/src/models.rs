//! Small convolutional classifiers over feature maps, and the parameter
//! snapshot format used by teacher trajectories.
//!
//! The one architecture family is a stack of Conv(3x3, same) -> ReLU ->
//! AvgPool(2) blocks followed by a global average pool and a linear head.
//! Parameters live in one flat `f32` vector whose layout is fixed by the
//! descriptor, so snapshots diff and serialize trivially.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Tape, Tensor};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::rng;

/// Architecture descriptor. Family, pooling, and activation have a single
/// supported value each but are part of the canonical string, which is the
/// equality and serialization contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    /// Number of Conv-ReLU-AvgPool blocks.
    pub depth: usize,
    /// Channels per block.
    pub width: usize,
    /// Input feature rows (3C).
    pub input_rows: usize,
    /// Input frames (T).
    pub input_cols: usize,
    pub n_classes: usize,
}

impl ArchDescriptor {
    pub fn new(depth: usize, width: usize, input_rows: usize, input_cols: usize, n_classes: usize) -> Result<Self> {
        let a = ArchDescriptor { depth, width, input_rows, input_cols, n_classes };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 {
            return Err(Error::parameter(format!(
                "convnet needs depth >= 1 and width >= 1, got d{} w{}",
                self.depth, self.width
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::parameter("need at least two classes".to_string()));
        }
        // each block halves the spatial extent; it must stay positive
        let (mut h, mut w) = (self.input_rows, self.input_cols);
        for d in 0..self.depth {
            h /= 2;
            w /= 2;
            if h == 0 || w == 0 {
                return Err(Error::parameter(format!(
                    "input {}x{} too small for depth {} (collapses at block {})",
                    self.input_rows, self.input_cols, self.depth, d
                )));
            }
        }
        Ok(())
    }

    /// Canonical string; two descriptors are equal iff these are equal.
    pub fn canonical(&self) -> String {
        format!(
            "convnet-d{}-w{}-avg-relu-in1x{}x{}-k{}",
            self.depth, self.width, self.input_rows, self.input_cols, self.n_classes
        )
    }

    /// Per-parameter-group shapes in flat layout order:
    /// `[conv_w, conv_b] * depth, fc_w, fc_b`.
    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::with_capacity(2 * self.depth + 2);
        let mut in_ch = 1usize;
        for _ in 0..self.depth {
            shapes.push(vec![self.width, in_ch, 3, 3]);
            shapes.push(vec![self.width]);
            in_ch = self.width;
        }
        shapes.push(vec![self.width, self.n_classes]);
        shapes.push(vec![self.n_classes]);
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl FromStr for ArchDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let err = || Error::parameter(format!("bad architecture string {s:?}"));
        let rest = s.strip_prefix("convnet-d").ok_or_else(err)?;
        let (depth, rest) = rest.split_once("-w").ok_or_else(err)?;
        let (width, rest) = rest.split_once("-avg-relu-in1x").ok_or_else(err)?;
        let (rows, rest) = rest.split_once('x').ok_or_else(err)?;
        let (cols, classes) = rest.split_once("-k").ok_or_else(err)?;
        ArchDescriptor::new(
            depth.parse().map_err(|_| err())?,
            width.parse().map_err(|_| err())?,
            rows.parse().map_err(|_| err())?,
            cols.parse().map_err(|_| err())?,
            classes.parse().map_err(|_| err())?,
        )
    }
}

/// Flat parameter state of one model at one training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub flat: Vec<f32>,
    pub arch: ArchDescriptor,
    pub epoch_tag: u32,
}

/// Ordered per-epoch snapshots of one training run; index 0 is the
/// initialization.
pub type Trajectory = Vec<ParamVector>;

/// Initialize parameters: Kaiming-uniform weights (bound `sqrt(6/fan_in)`),
/// zero biases. Deterministic per seed.
pub fn build(arch: &ArchDescriptor, seed: u64) -> Result<ParamVector> {
    arch.validate()?;
    let mut r = rng::seeded(seed);
    let mut flat = Vec::with_capacity(arch.param_count());
    for shape in arch.layer_shapes() {
        let n: usize = shape.iter().product();
        if shape.len() == 1 {
            flat.extend(std::iter::repeat(0.0f32).take(n));
        } else {
            // conv (co, ci, kh, kw): fan-in ci*kh*kw; linear (in, out): fan-in in
            let fan_in: usize = if shape.len() == 4 { shape[1] * shape[2] * shape[3] } else { shape[0] };
            let bound = (6.0 / fan_in as f64).sqrt();
            flat.extend((0..n).map(|_| rng::uniform_in(&mut r, -bound, bound) as f32));
        }
    }
    Ok(ParamVector { flat, arch: *arch, epoch_tag: 0 })
}

/// Split a flat parameter vector into per-layer tape leaves.
pub fn param_tensors(tape: &Tape, flat: &[f32], arch: &ArchDescriptor, requires_grad: bool) -> Vec<Tensor> {
    assert_eq!(flat.len(), arch.param_count(), "flat length vs architecture");
    let mut out = Vec::new();
    let mut at = 0usize;
    for shape in arch.layer_shapes() {
        let n: usize = shape.iter().product();
        out.push(tape.leaf(flat[at..at + n].to_vec(), shape, requires_grad));
        at += n;
    }
    out
}

/// Concatenate per-layer gradient/parameter tensors back into a flat vector.
pub fn flatten_tensors(tensors: &[Tensor]) -> Vec<f32> {
    let mut out = Vec::new();
    for t in tensors {
        out.extend(t.to_vec());
    }
    out
}

/// Forward pass as graph ops: `batch` is `(B, 1, rows, cols)`, output is
/// `(B, K)` logits.
pub fn forward_graph(params: &[Tensor], arch: &ArchDescriptor, batch: &Tensor) -> Tensor {
    assert_eq!(
        batch.shape(),
        &[batch.shape()[0], 1, arch.input_rows, arch.input_cols],
        "batch shape vs architecture input"
    );
    let mut x = batch.clone();
    for d in 0..arch.depth {
        x = x
            .conv2d(&params[2 * d], 1, Padding::Same)
            .add_bias(&params[2 * d + 1])
            .relu()
            .avg_pool2d(2);
    }
    let pooled = x.global_avg_pool(); // (B, width)
    pooled.matmul(&params[2 * arch.depth]).add_bias(&params[2 * arch.depth + 1])
}

/// Plain inference on raw data; builds a throwaway tape of constants.
pub fn forward(pv: &ParamVector, batch: &[f32], batch_size: usize) -> Vec<f32> {
    let tape = Tape::new();
    let params = param_tensors(&tape, &pv.flat, &pv.arch, false);
    let x = tape.constant(
        batch.to_vec(),
        vec![batch_size, 1, pv.arch.input_rows, pv.arch.input_cols],
    );
    forward_graph(&params, &pv.arch, &x).to_vec()
}

/// Gather `(B, 1, rows, cols)` batch data and labels for a set of indices.
pub fn make_batch(set: &FeatureSet, indices: &[usize]) -> (Vec<f32>, Vec<u32>) {
    let sz = set.sample_size();
    let mut data = Vec::with_capacity(indices.len() * sz);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(set.sample(i));
        labels.push(set.labels[i]);
    }
    (data, labels)
}

/// Test accuracy of a parameter vector over a feature set.
pub fn accuracy(pv: &ParamVector, set: &FeatureSet, eval_batch: usize) -> f64 {
    let k = pv.arch.n_classes;
    let mut correct = 0usize;
    let mut at = 0usize;
    while at < set.n {
        let end = (at + eval_batch).min(set.n);
        let idx: Vec<usize> = (at..end).collect();
        let (data, labels) = make_batch(set, &idx);
        let logits = forward(pv, &data, idx.len());
        for (row, &label) in labels.iter().enumerate() {
            let row_logits = &logits[row * k..(row + 1) * k];
            let pred = row_logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == label as usize {
                correct += 1;
            }
        }
        at = end;
    }
    correct as f64 / set.n as f64
}

/// Mean cross-entropy of a parameter vector over a feature set.
pub fn cross_entropy(pv: &ParamVector, set: &FeatureSet) -> f64 {
    let idx: Vec<usize> = (0..set.n).collect();
    let (data, labels) = make_batch(set, &idx);
    let tape = Tape::new();
    let params = param_tensors(&tape, &pv.flat, &pv.arch, false);
    let x = tape.constant(data, vec![set.n, 1, pv.arch.input_rows, pv.arch.input_cols]);
    forward_graph(&params, &pv.arch, &x).log_softmax().nll_loss(&labels).item() as f64
}

/// Plain SGD training with cross-entropy, shuffled per epoch from the seed.
/// Returns `epochs + 1` snapshots; snapshot `i` carries `epoch_tag = i`.
pub fn train_epochs(
    init: &ParamVector,
    set: &FeatureSet,
    epochs: usize,
    lr: f32,
    batch_size: usize,
    seed: u64,
) -> Trajectory {
    assert!(set.n > 0, "empty dataset");
    assert!(batch_size > 0, "zero batch size");
    let arch = init.arch;
    let mut flat = init.flat.clone();
    let mut trajectory = Vec::with_capacity(epochs + 1);
    trajectory.push(ParamVector { flat: flat.clone(), arch, epoch_tag: 0 });

    let mut r = rng::seeded(seed);
    let mut order: Vec<usize> = (0..set.n).collect();
    for epoch in 0..epochs {
        rng::shuffle(&mut r, &mut order);
        for chunk in order.chunks(batch_size) {
            let (data, labels) = make_batch(set, chunk);
            let tape = Tape::new();
            let params = param_tensors(&tape, &flat, &arch, true);
            let x = tape.constant(data, vec![chunk.len(), 1, arch.input_rows, arch.input_cols]);
            let loss = forward_graph(&params, &arch, &x).log_softmax().nll_loss(&labels);
            let refs: Vec<&Tensor> = params.iter().collect();
            let grads = tape.grad(&loss, &refs);
            let mut at = 0usize;
            for g in &grads {
                for gv in g.to_vec() {
                    flat[at] -= lr * gv;
                    at += 1;
                }
            }
        }
        trajectory.push(ParamVector { flat: flat.clone(), arch, epoch_tag: epoch as u32 + 1 });
    }
    trajectory
}

// ---------------------------------------------------------------------------
// Checkpoint and trajectory files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: String,
    epoch_tag: u32,
    param_count: usize,
}

/// One snapshot: a JSON header line, then the raw little-endian f32 vector.
pub fn save_checkpoint(pv: &ParamVector, path: impl AsRef<Path>) -> Result<()> {
    let header = CheckpointHeader {
        arch: pv.arch.canonical(),
        epoch_tag: pv.epoch_tag,
        param_count: pv.flat.len(),
    };
    let mut out = serde_json::to_string(&header)?.into_bytes();
    out.push(b'\n');
    for v in &pv.flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamVector> {
    let buf = fs::read(path)?;
    let nl = buf
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("checkpoint missing header line"))?;
    let header: CheckpointHeader = serde_json::from_slice(&buf[..nl])?;
    let arch: ArchDescriptor = header.arch.parse()?;
    let payload = &buf[nl + 1..];
    if payload.len() != header.param_count * 4 || header.param_count != arch.param_count() {
        return Err(Error::format(format!(
            "checkpoint payload {} bytes for {} declared parameters",
            payload.len(),
            header.param_count
        )));
    }
    let flat = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(ParamVector { flat, arch, epoch_tag: header.epoch_tag })
}

#[derive(Serialize, Deserialize)]
struct TrajectoryHeader {
    arch: String,
    teacher_seed: u64,
    snapshots: usize,
    param_count: usize,
}

/// A whole trajectory in one file: header line plus concatenated snapshots
/// in epoch order.
pub fn save_trajectory(traj: &Trajectory, teacher_seed: u64, path: impl AsRef<Path>) -> Result<()> {
    assert!(!traj.is_empty());
    let arch = traj[0].arch;
    let header = TrajectoryHeader {
        arch: arch.canonical(),
        teacher_seed,
        snapshots: traj.len(),
        param_count: arch.param_count(),
    };
    let mut out = serde_json::to_string(&header)?.into_bytes();
    out.push(b'\n');
    for pv in traj {
        assert_eq!(pv.arch, arch, "mixed architectures in one trajectory");
        for v in &pv.flat {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<(Trajectory, u64)> {
    let buf = fs::read(path)?;
    let nl = buf
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("trajectory missing header line"))?;
    let header: TrajectoryHeader = serde_json::from_slice(&buf[..nl])?;
    let arch: ArchDescriptor = header.arch.parse()?;
    if header.param_count != arch.param_count() {
        return Err(Error::format("trajectory header parameter count mismatch".to_string()));
    }
    let payload = &buf[nl + 1..];
    let per = header.param_count * 4;
    if payload.len() != per * header.snapshots {
        return Err(Error::format(format!(
            "trajectory payload {} bytes for {} snapshots of {} parameters",
            payload.len(),
            header.snapshots,
            header.param_count
        )));
    }
    let traj = (0..header.snapshots)
        .map(|i| {
            let flat = payload[i * per..(i + 1) * per]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            ParamVector { flat, arch, epoch_tag: i as u32 }
        })
        .collect();
    Ok((traj, header.teacher_seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn toy_arch() -> ArchDescriptor {
        ArchDescriptor::new(2, 4, 8, 8, 2).unwrap()
    }

    /// Two well-separated Gaussian blobs as 8x8 "feature maps".
    fn toy_set(n_per_class: usize, seed: u64, gap: f64) -> FeatureSet {
        let mut r = rng::seeded(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per_class {
            let label = (i % 2) as u32;
            let center = if label == 0 { gap } else { -gap };
            for _ in 0..64 {
                data.push((center + 0.3 * rng::normal(&mut r)) as f32);
            }
            labels.push(label);
        }
        FeatureSet { n: 2 * n_per_class, rows: 8, cols: 8, data, labels }
    }

    #[test]
    fn canonical_string_round_trips() {
        let arch = ArchDescriptor::new(3, 32, 60, 99, 10).unwrap();
        let s = arch.canonical();
        assert_eq!(s, "convnet-d3-w32-avg-relu-in1x60x99-k10");
        assert_eq!(s.parse::<ArchDescriptor>().unwrap(), arch);
        assert!("resnet-18".parse::<ArchDescriptor>().is_err());
    }

    #[test]
    fn param_count_by_hand() {
        // conv1 32*1*9+32, conv2/conv3 32*32*9+32 each, head 32*10+10
        let arch = ArchDescriptor::new(3, 32, 60, 99, 10).unwrap();
        assert_eq!(arch.param_count(), 288 + 32 + 9216 + 32 + 9216 + 32 + 320 + 10);
        assert_eq!(arch.param_count(), 19146);
    }

    #[test]
    fn zero_depth_is_a_parameter_error() {
        assert!(matches!(ArchDescriptor::new(0, 8, 8, 8, 2), Err(Error::Parameter(_))));
        assert!(ArchDescriptor::new(4, 8, 8, 8, 2).is_err(), "spatially collapsed");
    }

    #[test]
    fn build_is_deterministic_with_zero_biases() {
        let arch = toy_arch();
        let a = build(&arch, 11).unwrap();
        let b = build(&arch, 11).unwrap();
        assert_eq!(a.flat, b.flat);
        assert_ne!(a.flat, build(&arch, 12).unwrap().flat);
        // biases (after each conv weight block) start at zero
        let conv1 = 4 * 1 * 9;
        assert!(a.flat[conv1..conv1 + 4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_zero_input_give_zero_logits() {
        let arch = toy_arch();
        let pv = ParamVector { flat: vec![0.0; arch.param_count()], arch, epoch_tag: 0 };
        let logits = forward(&pv, &vec![0.0; 2 * 64], 2);
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_are_batch_independent() {
        let arch = toy_arch();
        let pv = build(&arch, 3).unwrap();
        let set = toy_set(2, 5, 0.5);
        let single = forward(&pv, set.sample(1), 1);
        let (data, _) = make_batch(&set, &[0, 1, 2]);
        let batched = forward(&pv, &data, 3);
        for k in 0..2 {
            assert_eq!(single[k], batched[2 + k]);
        }
    }

    #[test]
    fn logits_stay_finite_on_standardized_inputs() {
        let arch = toy_arch();
        let pv = build(&arch, 9).unwrap();
        let set = toy_set(8, 6, 1.0);
        let (data, _) = make_batch(&set, &(0..set.n).collect::<Vec<_>>());
        let logits = forward(&pv, &data, set.n);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_epochs_returns_only_init() {
        let arch = toy_arch();
        let pv = build(&arch, 1).unwrap();
        let traj = train_epochs(&pv, &toy_set(4, 2, 0.5), 0, 0.05, 4, 7);
        assert_eq!(traj.len(), 1);
        assert_eq!(traj[0].flat, pv.flat);
    }

    #[test]
    fn separable_toy_problem_trains() {
        let arch = toy_arch();
        let pv = build(&arch, 21).unwrap();
        let set = toy_set(16, 22, 0.6);
        let traj = train_epochs(&pv, &set, 30, 0.05, 8, 23);
        assert_eq!(traj.len(), 31);
        let acc = accuracy(traj.last().unwrap(), &set, 16);
        assert!(acc >= 0.95, "training accuracy {acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let arch = toy_arch();
        let pv = build(&arch, 31).unwrap();
        let set = toy_set(8, 32, 0.5);
        let a = train_epochs(&pv, &set, 3, 0.05, 4, 33);
        let b = train_epochs(&pv, &set, 3, 0.05, 4, 33);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.flat, y.flat);
        }
        assert!(a.iter().zip(a.iter().skip(1)).all(|(p, q)| p.epoch_tag + 1 == q.epoch_tag));
    }

    #[test]
    fn uniform_model_cross_entropy_is_ln_k() {
        let arch = toy_arch();
        let pv = ParamVector { flat: vec![0.0; arch.param_count()], arch, epoch_tag: 0 };
        let set = toy_set(8, 41, 0.5);
        let ce = cross_entropy(&pv, &set);
        assert!((ce - (2.0f64).ln()).abs() < 1e-5, "ce {ce}");
    }

    #[test]
    fn untrained_accuracy_is_near_chance() {
        // fresh data and fresh model per seed; accuracy should sit inside
        // 1/K +- 3 sigma of the pooled binomial
        let k = 4usize;
        let arch = ArchDescriptor::new(2, 4, 8, 8, k).unwrap();
        let n_per = 25usize;
        let seeds = 10u64;
        let mut mean = 0.0f64;
        for s in 0..seeds {
            let mut r = rng::seeded(1000 + s);
            let n = k * n_per;
            let mut data = Vec::with_capacity(n * 64);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                labels.push((i % k) as u32);
                for _ in 0..64 {
                    data.push(rng::normal(&mut r) as f32);
                }
            }
            let set = FeatureSet { n, rows: 8, cols: 8, data, labels };
            let pv = build(&arch, 2000 + s).unwrap();
            mean += accuracy(&pv, &set, 32);
        }
        mean /= seeds as f64;
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / (seeds as f64 * (k * n_per) as f64)).sqrt();
        assert!(
            (mean - p).abs() <= 3.0 * sigma,
            "mean accuracy {mean} vs chance {p} (3 sigma = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let arch = toy_arch();
        let mut pv = build(&arch, 5).unwrap();
        pv.epoch_tag = 17;
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&pv, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, pv);

        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&back, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let arch = toy_arch();
        let pv = build(&arch, 6).unwrap();
        let traj = train_epochs(&pv, &toy_set(4, 7, 0.5), 2, 0.05, 4, 8);
        let path = dir.path().join("t.traj");
        save_trajectory(&traj, 42, &path).unwrap();
        let (back, seed) = load_trajectory(&path).unwrap();
        assert_eq!(seed, 42);
        assert_eq!(back.len(), traj.len());
        for (a, b) in back.iter().zip(&traj) {
            assert_eq!(a.flat, b.flat);
            assert_eq!(a.epoch_tag, b.epoch_tag);
        }
    }
}
