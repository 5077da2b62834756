//! Minimal reverse-mode differentiation over dense `f32` tensors.
//!
//! A [`Tape`] records every primitive application eagerly. Backward rules
//! are emitted as ordinary tape nodes, so the result of [`Tape::grad`] is
//! itself differentiable — that is what lets the distillation objective
//! differentiate through a stack of unrolled student SGD steps with respect
//! to the synthetic data and the learning rate.
//!
//! Shape mismatches and non-scalar losses are contract violations and panic
//! with both offending shapes in the message, matching how dense-tensor
//! crates in this ecosystem behave. A tape and its tensors are confined to
//! one thread (`Rc` internally); independent tapes can run concurrently.

mod kernels;

use std::cell::RefCell;
use std::rc::Rc;

pub use kernels::conv_out_dim;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k-1)/2` on each side; requires an odd kernel and
    /// preserves the spatial extent at stride 1.
    Same,
    Valid,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f32),
    Exp(usize),
    Sqrt(usize),
    Relu(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    ConvInputGrad { w: usize, dy: usize, stride: usize, pad: usize },
    ConvWeightGrad { x: usize, dy: usize, stride: usize, pad: usize },
    AvgPool { x: usize, k: usize },
    AvgPoolGrad { dy: usize, k: usize },
    SumHw(usize),
    SpreadHw(usize),
    SumAll(usize),
    BcastScalar(usize),
    SumLastKeep(usize),
    BcastLast(usize),
    BcastBias(usize),
    SumToBias(usize),
    Reshape(usize),
    GatherRows { x: usize, indices: Rc<Vec<usize>> },
    ScatterRows { x: usize, indices: Rc<Vec<usize>> },
    LogSoftmax(usize),
    NllLoss { logp: usize, targets: Rc<Vec<u32>> },
    SqNorm(usize),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: RefCell<Vec<Node>>,
}

/// Recording arena for one differentiable computation.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

/// Handle to one tape node: a shape, row-major `f32` data, and a flag saying
/// whether gradients flow into it.
#[derive(Clone)]
pub struct Tensor {
    tape: Rc<TapeInner>,
    id: usize,
    shape: Vec<usize>,
    requires_grad: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input tensor. Gradients are produced for it only when
    /// `requires_grad` is set.
    pub fn leaf(&self, data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        assert_eq!(
            data.len(),
            numel(&shape),
            "shape error: {} values for shape {:?}",
            data.len(),
            shape
        );
        self.push(Op::Leaf, shape, data, requires_grad)
    }

    pub fn constant(&self, data: Vec<f32>, shape: Vec<usize>) -> Tensor {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&self, v: f32, requires_grad: bool) -> Tensor {
        self.leaf(vec![v], vec![1], requires_grad)
    }

    fn push(&self, op: Op, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        let mut nodes = self.inner.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op, shape: shape.clone(), data, requires_grad });
        Tensor { tape: self.inner.clone(), id, shape, requires_grad }
    }

    fn handle(&self, id: usize) -> Tensor {
        let nodes = self.inner.nodes.borrow();
        Tensor {
            tape: self.inner.clone(),
            id,
            shape: nodes[id].shape.clone(),
            requires_grad: nodes[id].requires_grad,
        }
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.inner.nodes.borrow()[id].shape.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.inner.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to each `wrt`
    /// tensor. Entries with no path to the loss get exact zeros. The
    /// returned tensors live on the same tape and are differentiable again.
    pub fn grad(&self, loss: &Tensor, wrt: &[&Tensor]) -> Vec<Tensor> {
        assert!(Rc::ptr_eq(&self.inner, &loss.tape), "loss from a different tape");
        assert_eq!(
            loss.numel(),
            1,
            "contract error: grad needs a scalar loss, got shape {:?}",
            loss.shape
        );
        for t in wrt {
            assert!(Rc::ptr_eq(&self.inner, &t.tape), "wrt tensor from a different tape");
        }

        let mut adjoint: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        adjoint[loss.id] = Some(self.constant(vec![1.0], loss.shape.clone()));

        for id in (0..=loss.id).rev() {
            let Some(g) = adjoint[id].clone() else { continue };
            let op = {
                let nodes = self.inner.nodes.borrow();
                if !nodes[id].requires_grad {
                    continue;
                }
                nodes[id].op.clone()
            };
            self.backprop_node(id, &g, &op, &mut adjoint);
        }

        wrt.iter()
            .map(|t| match adjoint.get(t.id).and_then(|a| a.clone()) {
                Some(g) => g,
                None => self.constant(vec![0.0; t.numel()], t.shape.clone()),
            })
            .collect()
    }

    fn accumulate(&self, adjoint: &mut [Option<Tensor>], id: usize, contrib: Tensor) {
        if !self.requires(id) {
            return;
        }
        adjoint[id] = Some(match adjoint[id].take() {
            Some(prev) => prev.add(&contrib),
            None => contrib,
        });
    }

    fn backprop_node(&self, id: usize, g: &Tensor, op: &Op, adjoint: &mut [Option<Tensor>]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adjoint, a, g.clone());
                self.accumulate(adjoint, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adjoint, a, g.clone());
                self.accumulate(adjoint, b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                self.accumulate(adjoint, a, g.mul(&self.handle(b)));
                self.accumulate(adjoint, b, g.mul(&self.handle(a)));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.handle(a), self.handle(b));
                self.accumulate(adjoint, a, g.div(&tb));
                self.accumulate(adjoint, b, g.mul(&ta.div(&tb.mul(&tb))).scale(-1.0));
            }
            Op::Scale(a, c) => self.accumulate(adjoint, a, g.scale(c)),
            Op::Exp(a) => self.accumulate(adjoint, a, g.mul(&self.handle(id))),
            Op::Sqrt(a) => self.accumulate(adjoint, a, g.div(&self.handle(id).scale(2.0))),
            Op::Relu(a) => {
                let mask: Vec<f32> = {
                    let nodes = self.inner.nodes.borrow();
                    nodes[a].data.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect()
                };
                let mask = self.constant(mask, self.shape_of(a));
                self.accumulate(adjoint, a, g.mul(&mask));
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.handle(a), self.handle(b));
                self.accumulate(adjoint, a, g.matmul(&tb.transpose()));
                self.accumulate(adjoint, b, ta.transpose().matmul(g));
            }
            Op::Transpose(a) => self.accumulate(adjoint, a, g.transpose()),
            Op::Conv2d { x, w, stride, pad } => {
                let (tx, tw) = (self.handle(x), self.handle(w));
                self.accumulate(adjoint, x, conv_input_grad(&tw, g, stride, pad, &self.shape_of(x)));
                self.accumulate(adjoint, w, conv_weight_grad(&tx, g, stride, pad, &self.shape_of(w)));
            }
            // z = input-grad(w, dy) is bilinear; its adjoints mirror into
            // the other two members of the convolution triple
            Op::ConvInputGrad { w, dy, stride, pad } => {
                let (tw, tdy) = (self.handle(w), self.handle(dy));
                self.accumulate(adjoint, w, conv_weight_grad(g, &tdy, stride, pad, &self.shape_of(w)));
                self.accumulate(adjoint, dy, g.conv2d(&tw, stride, pad_mode(pad)));
            }
            Op::ConvWeightGrad { x, dy, stride, pad } => {
                let (tx, tdy) = (self.handle(x), self.handle(dy));
                self.accumulate(adjoint, x, conv_input_grad(g, &tdy, stride, pad, &self.shape_of(x)));
                self.accumulate(adjoint, dy, tx.conv2d(g, stride, pad_mode(pad)));
            }
            Op::AvgPool { x, k } => {
                self.accumulate(adjoint, x, avg_pool_grad(g, k, &self.shape_of(x)));
            }
            Op::AvgPoolGrad { dy, k } => self.accumulate(adjoint, dy, g.avg_pool2d(k)),
            Op::SumHw(x) => {
                let xs = self.shape_of(x);
                self.accumulate(adjoint, x, g.spread_hw(xs[2], xs[3]));
            }
            Op::SpreadHw(x) => self.accumulate(adjoint, x, g.sum_hw()),
            Op::SumAll(x) => {
                let xs = self.shape_of(x);
                self.accumulate(adjoint, x, g.bcast_scalar(&xs));
            }
            Op::BcastScalar(s) => self.accumulate(adjoint, s, g.sum_all()),
            Op::SumLastKeep(x) => {
                let k = *self.shape_of(x).last().unwrap();
                self.accumulate(adjoint, x, g.bcast_last(k));
            }
            Op::BcastLast(x) => self.accumulate(adjoint, x, g.sum_last_keepdim()),
            Op::BcastBias(bias) => self.accumulate(adjoint, bias, g.sum_to_bias()),
            Op::SumToBias(x) => {
                let xs = self.shape_of(x);
                self.accumulate(adjoint, x, g.bcast_bias(&xs));
            }
            Op::Reshape(a) => {
                let xs = self.shape_of(a);
                self.accumulate(adjoint, a, g.reshape(&xs));
            }
            Op::GatherRows { x, ref indices } => {
                let n0 = self.shape_of(x)[0];
                self.accumulate(adjoint, x, g.scatter_rows(indices.clone(), n0));
            }
            Op::ScatterRows { x, ref indices } => {
                self.accumulate(adjoint, x, g.gather_rows_shared(indices.clone()));
            }
            Op::LogSoftmax(a) => {
                let k = *self.shape_of(a).last().unwrap();
                let softmax = self.handle(id).exp();
                let row_sums = g.sum_last_keepdim().bcast_last(k);
                self.accumulate(adjoint, a, g.sub(&softmax.mul(&row_sums)));
            }
            Op::NllLoss { logp, ref targets } => {
                let shape = self.shape_of(logp);
                let (b, k) = (shape[0], shape[1]);
                let mut onehot = vec![0.0f32; b * k];
                for (i, &t) in targets.iter().enumerate() {
                    onehot[i * k + t as usize] = 1.0;
                }
                let onehot = self.constant(onehot, shape.clone());
                let contrib = g.bcast_scalar(&shape).mul(&onehot).scale(-1.0 / b as f32);
                self.accumulate(adjoint, logp, contrib);
            }
            Op::SqNorm(x) => {
                let tx = self.handle(x);
                let xs = self.shape_of(x);
                self.accumulate(adjoint, x, g.bcast_scalar(&xs).mul(&tx).scale(2.0));
            }
        }
    }
}

fn pad_mode(pad: usize) -> Padding {
    if pad == 0 {
        Padding::Valid
    } else {
        Padding::Same
    }
}

fn conv_params(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> (usize, usize) {
    let out_h = conv_out_dim(x_shape[2], w_shape[2], stride, pad);
    let out_w = conv_out_dim(x_shape[3], w_shape[3], stride, pad);
    (out_h, out_w)
}

fn conv_input_grad(w: &Tensor, dy: &Tensor, stride: usize, pad: usize, x_shape: &[usize]) -> Tensor {
    let tape = w.tape_rc();
    let data = {
        let nodes = tape.nodes.borrow();
        let ws = &nodes[w.id];
        let dys = &nodes[dy.id];
        kernels::conv2d_input_grad(
            &ws.data, &dys.data, x_shape[0], x_shape[1], x_shape[2], x_shape[3], ws.shape[0],
            ws.shape[2], ws.shape[3], stride, pad,
        )
    };
    let requires = w.requires_grad || dy.requires_grad;
    Tape { inner: tape }.push(
        Op::ConvInputGrad { w: w.id, dy: dy.id, stride, pad },
        x_shape.to_vec(),
        data,
        requires,
    )
}

fn conv_weight_grad(x: &Tensor, dy: &Tensor, stride: usize, pad: usize, w_shape: &[usize]) -> Tensor {
    let tape = x.tape_rc();
    let data = {
        let nodes = tape.nodes.borrow();
        let xs = &nodes[x.id];
        let dys = &nodes[dy.id];
        kernels::conv2d_weight_grad(
            &xs.data, &dys.data, xs.shape[0], xs.shape[1], xs.shape[2], xs.shape[3], w_shape[0],
            w_shape[2], w_shape[3], stride, pad,
        )
    };
    let requires = x.requires_grad || dy.requires_grad;
    Tape { inner: tape }.push(
        Op::ConvWeightGrad { x: x.id, dy: dy.id, stride, pad },
        w_shape.to_vec(),
        data,
        requires,
    )
}

fn avg_pool_grad(dy: &Tensor, k: usize, x_shape: &[usize]) -> Tensor {
    let tape = dy.tape_rc();
    let data = {
        let nodes = tape.nodes.borrow();
        let d = &nodes[dy.id];
        kernels::avg_pool2d_grad(&d.data, x_shape[0], x_shape[1], x_shape[2], x_shape[3], k)
    };
    let requires = dy.requires_grad;
    Tape { inner: tape }.push(Op::AvgPoolGrad { dy: dy.id, k }, x_shape.to_vec(), data, requires)
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape(&self) -> Tape {
        Tape { inner: self.tape.clone() }
    }

    fn tape_rc(&self) -> Rc<TapeInner> {
        self.tape.clone()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.tape.nodes.borrow()[self.id].data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape);
        self.tape.nodes.borrow()[self.id].data[0]
    }

    fn same_tape(&self, other: &Tensor, op: &str) {
        assert!(Rc::ptr_eq(&self.tape, &other.tape), "{op}: operands from different tapes");
    }

    fn binary_elementwise(
        &self,
        other: &Tensor,
        op_name: &str,
        make_op: impl Fn(usize, usize) -> Op,
        f: impl Fn(f32, f32) -> f32,
    ) -> Tensor {
        self.same_tape(other, op_name);
        assert_eq!(
            self.shape, other.shape,
            "shape error: {op_name} needs matching shapes, got {:?} and {:?}",
            self.shape, other.shape
        );
        let data = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .data
                .iter()
                .zip(&nodes[other.id].data)
                .map(|(&a, &b)| f(a, b))
                .collect()
        };
        let requires = self.requires_grad || other.requires_grad;
        Tape { inner: self.tape_rc() }.push(make_op(self.id, other.id), self.shape.clone(), data, requires)
    }

    fn unary(
        &self,
        make_op: impl Fn(usize) -> Op,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Tensor {
        Tape { inner: self.tape_rc() }.push(make_op(self.id), shape, data, self.requires_grad)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary_elementwise(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary_elementwise(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary_elementwise(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.binary_elementwise(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let data = self.tape.nodes.borrow()[self.id].data.iter().map(|&v| v * c).collect();
        self.unary(|a| Op::Scale(a, c), self.shape.clone(), data)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        let data = self.tape.nodes.borrow()[self.id].data.iter().map(|v| v.exp()).collect();
        self.unary(Op::Exp, self.shape.clone(), data)
    }

    /// Elementwise square root; defined for nonnegative inputs.
    pub fn sqrt(&self) -> Tensor {
        let data = self.tape.nodes.borrow()[self.id].data.iter().map(|v| v.sqrt()).collect();
        self.unary(Op::Sqrt, self.shape.clone(), data)
    }

    pub fn relu(&self) -> Tensor {
        let data = self.tape.nodes.borrow()[self.id].data.iter().map(|v| v.max(0.0)).collect();
        self.unary(Op::Relu, self.shape.clone(), data)
    }

    /// `(m x k) @ (k x n)`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.same_tape(other, "matmul");
        assert!(
            self.shape.len() == 2 && other.shape.len() == 2 && self.shape[1] == other.shape[0],
            "shape error: matmul of {:?} and {:?}",
            self.shape,
            other.shape
        );
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let data = {
            let nodes = self.tape.nodes.borrow();
            kernels::matmul(&nodes[self.id].data, &nodes[other.id].data, m, k, n)
        };
        let requires = self.requires_grad || other.requires_grad;
        Tape { inner: self.tape_rc() }.push(Op::Matmul(self.id, other.id), vec![m, n], data, requires)
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "shape error: transpose of {:?}", self.shape);
        let (m, n) = (self.shape[0], self.shape[1]);
        let data = kernels::transpose(&self.tape.nodes.borrow()[self.id].data, m, n);
        self.unary(Op::Transpose, vec![n, m], data)
    }

    /// 2-D convolution of an `(B, C_in, H, W)` input with `(C_out, C_in,
    /// KH, KW)` weights.
    pub fn conv2d(&self, weights: &Tensor, stride: usize, padding: Padding) -> Tensor {
        self.same_tape(weights, "conv2d");
        assert!(
            self.shape.len() == 4 && weights.shape.len() == 4 && self.shape[1] == weights.shape[1],
            "shape error: conv2d of {:?} with weights {:?}",
            self.shape,
            weights.shape
        );
        assert!(stride >= 1, "conv2d stride must be >= 1");
        let (kh, kw) = (weights.shape[2], weights.shape[3]);
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => {
                assert!(kh % 2 == 1 && kw % 2 == 1, "same padding needs odd kernels, got {kh}x{kw}");
                kh / 2
            }
        };
        let (out_h, out_w) = conv_params(&self.shape, &weights.shape, stride, pad);
        let data = {
            let nodes = self.tape.nodes.borrow();
            kernels::conv2d(
                &nodes[self.id].data,
                &nodes[weights.id].data,
                self.shape[0],
                self.shape[1],
                self.shape[2],
                self.shape[3],
                weights.shape[0],
                kh,
                kw,
                stride,
                pad,
            )
        };
        let requires = self.requires_grad || weights.requires_grad;
        Tape { inner: self.tape_rc() }.push(
            Op::Conv2d { x: self.id, w: weights.id, stride, pad },
            vec![self.shape[0], weights.shape[0], out_h, out_w],
            data,
            requires,
        )
    }

    /// Non-overlapping `k x k` average pooling with floor semantics.
    pub fn avg_pool2d(&self, k: usize) -> Tensor {
        assert_eq!(self.shape.len(), 4, "shape error: avg_pool2d of {:?}", self.shape);
        let (b, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        assert!(h / k >= 1 && w / k >= 1, "shape error: pooling {h}x{w} by {k}");
        let data = kernels::avg_pool2d(&self.tape.nodes.borrow()[self.id].data, b, c, h, w, k);
        self.unary(|x| Op::AvgPool { x, k }, vec![b, c, h / k, w / k], data)
    }

    /// Sum over the two spatial axes: `(B, C, H, W) -> (B, C)`.
    pub fn sum_hw(&self) -> Tensor {
        assert_eq!(self.shape.len(), 4, "shape error: sum_hw of {:?}", self.shape);
        let (b, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let mut out = vec![0.0f32; b * c];
        {
            let nodes = self.tape.nodes.borrow();
            for (bc, o) in out.iter_mut().enumerate() {
                *o = nodes[self.id].data[bc * h * w..(bc + 1) * h * w].iter().sum();
            }
        }
        self.unary(Op::SumHw, vec![b, c], out)
    }

    /// Broadcast `(B, C)` over new spatial axes `(B, C, H, W)`.
    pub fn spread_hw(&self, h: usize, w: usize) -> Tensor {
        assert_eq!(self.shape.len(), 2, "shape error: spread_hw of {:?}", self.shape);
        let (b, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0f32; b * c * h * w];
        {
            let nodes = self.tape.nodes.borrow();
            for bc in 0..b * c {
                out[bc * h * w..(bc + 1) * h * w].fill(nodes[self.id].data[bc]);
            }
        }
        self.unary(Op::SpreadHw, vec![b, c, h, w], out)
    }

    /// Global average over the spatial axes: `(B, C, H, W) -> (B, C)`.
    pub fn global_avg_pool(&self) -> Tensor {
        let (h, w) = (self.shape[2], self.shape[3]);
        self.sum_hw().scale(1.0 / (h * w) as f32)
    }

    pub fn sum_all(&self) -> Tensor {
        let total: f32 = self.tape.nodes.borrow()[self.id].data.iter().sum();
        self.unary(Op::SumAll, vec![1], vec![total])
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale(1.0 / self.numel() as f32)
    }

    /// Broadcast a scalar to an arbitrary shape.
    pub fn bcast_scalar(&self, shape: &[usize]) -> Tensor {
        assert_eq!(self.numel(), 1, "shape error: bcast_scalar of non-scalar {:?}", self.shape);
        let v = self.tape.nodes.borrow()[self.id].data[0];
        self.unary(Op::BcastScalar, shape.to_vec(), vec![v; numel(shape)])
    }

    /// Row sums with a kept final axis: `(B, K) -> (B, 1)`.
    pub fn sum_last_keepdim(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "shape error: sum_last_keepdim of {:?}", self.shape);
        let (b, k) = (self.shape[0], self.shape[1]);
        let data = {
            let nodes = self.tape.nodes.borrow();
            (0..b).map(|r| nodes[self.id].data[r * k..(r + 1) * k].iter().sum()).collect()
        };
        self.unary(Op::SumLastKeep, vec![b, 1], data)
    }

    /// Broadcast `(B, 1)` columns across a final axis of length `k`.
    pub fn bcast_last(&self, k: usize) -> Tensor {
        assert!(
            self.shape.len() == 2 && self.shape[1] == 1,
            "shape error: bcast_last of {:?}",
            self.shape
        );
        let b = self.shape[0];
        let data = {
            let nodes = self.tape.nodes.borrow();
            let mut out = Vec::with_capacity(b * k);
            for r in 0..b {
                out.extend(std::iter::repeat(nodes[self.id].data[r]).take(k));
            }
            out
        };
        self.unary(Op::BcastLast, vec![b, k], data)
    }

    /// Broadcast a length-`C` vector along axis 1 of `shape`.
    pub fn bcast_bias(&self, shape: &[usize]) -> Tensor {
        assert!(
            self.shape.len() == 1 && shape.len() >= 2 && shape[1] == self.shape[0],
            "shape error: bias {:?} into {:?}",
            self.shape,
            shape
        );
        let c = self.shape[0];
        let rest: usize = shape[2..].iter().product();
        let data = {
            let nodes = self.tape.nodes.borrow();
            let mut out = Vec::with_capacity(numel(shape));
            for _ in 0..shape[0] {
                for ci in 0..c {
                    out.extend(std::iter::repeat(nodes[self.id].data[ci]).take(rest));
                }
            }
            out
        };
        self.unary(Op::BcastBias, shape.to_vec(), data)
    }

    /// Adjoint of [`Tensor::bcast_bias`]: sum everything but axis 1.
    pub fn sum_to_bias(&self) -> Tensor {
        assert!(self.shape.len() >= 2, "shape error: sum_to_bias of {:?}", self.shape);
        let c = self.shape[1];
        let rest: usize = self.shape[2..].iter().product();
        let data = {
            let nodes = self.tape.nodes.borrow();
            let src = &nodes[self.id].data;
            let mut out = vec![0.0f32; c];
            for b in 0..self.shape[0] {
                for (ci, o) in out.iter_mut().enumerate() {
                    let base = (b * c + ci) * rest;
                    *o += src[base..base + rest].iter().sum::<f32>();
                }
            }
            out
        };
        self.unary(Op::SumToBias, vec![c], data)
    }

    /// Bias-add along axis 1 (channels of a feature map or columns of a
    /// logit matrix).
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        self.add(&bias.bcast_bias(&self.shape))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            self.numel(),
            numel(shape),
            "shape error: reshape {:?} to {:?}",
            self.shape,
            shape
        );
        let data = self.to_vec();
        self.unary(Op::Reshape, shape.to_vec(), data)
    }

    /// Select rows (axis-0 slices) by index; repeats allowed.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        self.gather_rows_shared(Rc::new(indices.to_vec()))
    }

    fn gather_rows_shared(&self, indices: Rc<Vec<usize>>) -> Tensor {
        assert!(!self.shape.is_empty(), "shape error: gather_rows of {:?}", self.shape);
        let n0 = self.shape[0];
        let row: usize = self.shape[1..].iter().product();
        let data = {
            let nodes = self.tape.nodes.borrow();
            let src = &nodes[self.id].data;
            let mut out = Vec::with_capacity(indices.len() * row);
            for &i in indices.iter() {
                assert!(i < n0, "shape error: row {i} out of {n0}");
                out.extend_from_slice(&src[i * row..(i + 1) * row]);
            }
            out
        };
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        self.unary(|x| Op::GatherRows { x, indices: indices.clone() }, shape, data)
    }

    /// Adjoint of [`Tensor::gather_rows`]: scatter-add rows into `n0` slots.
    fn scatter_rows(&self, indices: Rc<Vec<usize>>, n0: usize) -> Tensor {
        assert_eq!(self.shape[0], indices.len(), "shape error: scatter_rows count");
        let row: usize = self.shape[1..].iter().product();
        let data = {
            let nodes = self.tape.nodes.borrow();
            let src = &nodes[self.id].data;
            let mut out = vec![0.0f32; n0 * row];
            for (r, &i) in indices.iter().enumerate() {
                for (o, &v) in out[i * row..(i + 1) * row].iter_mut().zip(&src[r * row..(r + 1) * row]) {
                    *o += v;
                }
            }
            out
        };
        let mut shape = self.shape.clone();
        shape[0] = n0;
        self.unary(|x| Op::ScatterRows { x, indices: indices.clone() }, shape, data)
    }

    /// Row-wise log-softmax of `(B, K)` logits.
    pub fn log_softmax(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "shape error: log_softmax of {:?}", self.shape);
        let (b, k) = (self.shape[0], self.shape[1]);
        let data = kernels::log_softmax(&self.tape.nodes.borrow()[self.id].data, b, k);
        self.unary(Op::LogSoftmax, self.shape.clone(), data)
    }

    /// Mean negative log-likelihood of the target class per row; input is
    /// log-probabilities from [`Tensor::log_softmax`].
    pub fn nll_loss(&self, targets: &[u32]) -> Tensor {
        assert_eq!(self.shape.len(), 2, "shape error: nll_loss of {:?}", self.shape);
        let (b, k) = (self.shape[0], self.shape[1]);
        assert_eq!(targets.len(), b, "shape error: {} targets for batch {b}", targets.len());
        let total: f32 = {
            let nodes = self.tape.nodes.borrow();
            targets
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    assert!((t as usize) < k, "target {t} out of range for {k} classes");
                    nodes[self.id].data[i * k + t as usize]
                })
                .sum()
        };
        let targets = Rc::new(targets.to_vec());
        Tape { inner: self.tape_rc() }.push(
            Op::NllLoss { logp: self.id, targets },
            vec![1],
            vec![-total / b as f32],
            self.requires_grad,
        )
    }

    /// Squared Euclidean norm of all entries, as a scalar node.
    pub fn sq_norm(&self) -> Tensor {
        let total: f32 = self.tape.nodes.borrow()[self.id].data.iter().map(|v| v * v).sum();
        self.unary(Op::SqNorm, vec![1], vec![total])
    }
}

/// One differentiable SGD step: returns `params - lr * dLoss/dparams` as new
/// graph nodes, leaving the originals untouched. Because the gradients are
/// themselves tape nodes, an outer objective can differentiate through the
/// step with respect to anything upstream — including `lr`.
pub fn sgd_step_differentiable(params: &[Tensor], loss: &Tensor, lr: &Tensor) -> Vec<Tensor> {
    assert_eq!(lr.numel(), 1, "learning rate must be scalar");
    let tape = loss.tape();
    let refs: Vec<&Tensor> = params.iter().collect();
    let grads = tape.grad(loss, &refs);
    params
        .iter()
        .zip(&grads)
        .map(|(p, g)| p.sub(&lr.bcast_scalar(p.shape()).mul(g)))
        .collect()
}
