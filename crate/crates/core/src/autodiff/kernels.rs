//! Raw f32 compute kernels behind the tape ops. Everything is sequential
//! with a fixed reduction order, so results are bit-reproducible.

/// Output spatial extent of a convolution/pool axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= kernel, "kernel {kernel} larger than padded input {input}+2*{pad}");
    (input + 2 * pad - kernel) / stride + 1
}

/// `(m x k) * (k x n)` row-major matrix product.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Valid output-column range of a convolution for one kernel column:
/// those `ow` with `0 <= ow*stride - pad + kw < in_w`.
fn ow_range(in_w: usize, out_w: usize, stride: usize, pad: usize, kw: usize) -> (usize, usize) {
    let lo = if pad > kw { (pad - kw).div_ceil(stride) } else { 0 };
    let hi_excl = if in_w + pad > kw {
        (((in_w + pad - kw - 1) / stride) + 1).min(out_w)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

/// Direct convolution, NCHW input and OIHW weights.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f32],
    w: &[f32],
    batch: usize,
    c_in: usize,
    in_h: usize,
    in_w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let out_h = conv_out_dim(in_h, kh, stride, pad);
    let out_w = conv_out_dim(in_w, kw, stride, pad);
    let mut out = vec![0.0f32; batch * c_out * out_h * out_w];
    for b in 0..batch {
        for co in 0..c_out {
            let out_base = (b * c_out + co) * out_h * out_w;
            for ci in 0..c_in {
                let x_base = (b * c_in + ci) * in_h * in_w;
                let w_base = (co * c_in + ci) * kh * kw;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = w[w_base + ki * kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = ow_range(in_w, out_w, stride, pad, kj);
                        for oh in 0..out_h {
                            let ih = oh * stride + ki;
                            if ih < pad || ih - pad >= in_h {
                                continue;
                            }
                            let x_row = x_base + (ih - pad) * in_w;
                            let o_row = out_base + oh * out_w;
                            if stride == 1 {
                                // contiguous slide: out[ow] += wv * x[ow - pad + kj]
                                let off = kj as isize - pad as isize;
                                for ow in lo..hi {
                                    let xi = (x_row as isize + ow as isize + off) as usize;
                                    out[o_row + ow] += wv * x[xi];
                                }
                            } else {
                                for ow in lo..hi {
                                    let iw = ow * stride + kj - pad;
                                    out[o_row + ow] += wv * x[x_row + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`conv2d`] w.r.t. its input: scatter `dy` back through the
/// kernel taps.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_input_grad(
    w: &[f32],
    dy: &[f32],
    batch: usize,
    c_in: usize,
    in_h: usize,
    in_w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let out_h = conv_out_dim(in_h, kh, stride, pad);
    let out_w = conv_out_dim(in_w, kw, stride, pad);
    let mut dx = vec![0.0f32; batch * c_in * in_h * in_w];
    for b in 0..batch {
        for ci in 0..c_in {
            let dx_base = (b * c_in + ci) * in_h * in_w;
            for co in 0..c_out {
                let dy_base = (b * c_out + co) * out_h * out_w;
                let w_base = (co * c_in + ci) * kh * kw;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = w[w_base + ki * kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = ow_range(in_w, out_w, stride, pad, kj);
                        for oh in 0..out_h {
                            let ih = oh * stride + ki;
                            if ih < pad || ih - pad >= in_h {
                                continue;
                            }
                            let dx_row = dx_base + (ih - pad) * in_w;
                            let dy_row = dy_base + oh * out_w;
                            for ow in lo..hi {
                                let iw = ow * stride + kj - pad;
                                dx[dx_row + iw] += wv * dy[dy_row + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of [`conv2d`] w.r.t. its weights.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_weight_grad(
    x: &[f32],
    dy: &[f32],
    batch: usize,
    c_in: usize,
    in_h: usize,
    in_w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let out_h = conv_out_dim(in_h, kh, stride, pad);
    let out_w = conv_out_dim(in_w, kw, stride, pad);
    let mut dw = vec![0.0f32; c_out * c_in * kh * kw];
    for co in 0..c_out {
        for ci in 0..c_in {
            let w_base = (co * c_in + ci) * kh * kw;
            for ki in 0..kh {
                for kj in 0..kw {
                    let (lo, hi) = ow_range(in_w, out_w, stride, pad, kj);
                    let mut acc = 0.0f32;
                    for b in 0..batch {
                        let x_base = (b * c_in + ci) * in_h * in_w;
                        let dy_base = (b * c_out + co) * out_h * out_w;
                        for oh in 0..out_h {
                            let ih = oh * stride + ki;
                            if ih < pad || ih - pad >= in_h {
                                continue;
                            }
                            let x_row = x_base + (ih - pad) * in_w;
                            let dy_row = dy_base + oh * out_w;
                            for ow in lo..hi {
                                let iw = ow * stride + kj - pad;
                                acc += dy[dy_row + ow] * x[x_row + iw];
                            }
                        }
                    }
                    dw[w_base + ki * kw + kj] = acc;
                }
            }
        }
    }
    dw
}

/// Non-overlapping k x k average pooling (floor semantics: trailing rows and
/// columns that do not fill a block are dropped).
pub fn avg_pool2d(x: &[f32], batch: usize, ch: usize, in_h: usize, in_w: usize, k: usize) -> Vec<f32> {
    let out_h = in_h / k;
    let out_w = in_w / k;
    let inv = 1.0 / (k * k) as f32;
    let mut out = vec![0.0f32; batch * ch * out_h * out_w];
    for bc in 0..batch * ch {
        let x_base = bc * in_h * in_w;
        let o_base = bc * out_h * out_w;
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut acc = 0.0f32;
                for i in 0..k {
                    let row = x_base + (oh * k + i) * in_w + ow * k;
                    for j in 0..k {
                        acc += x[row + j];
                    }
                }
                out[o_base + oh * out_w + ow] = acc * inv;
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2d`]: spread each gradient uniformly over its block.
pub fn avg_pool2d_grad(
    dy: &[f32],
    batch: usize,
    ch: usize,
    in_h: usize,
    in_w: usize,
    k: usize,
) -> Vec<f32> {
    let out_h = in_h / k;
    let out_w = in_w / k;
    let inv = 1.0 / (k * k) as f32;
    let mut dx = vec![0.0f32; batch * ch * in_h * in_w];
    for bc in 0..batch * ch {
        let dy_base = bc * out_h * out_w;
        let dx_base = bc * in_h * in_w;
        for oh in 0..out_h {
            for ow in 0..out_w {
                let g = dy[dy_base + oh * out_w + ow] * inv;
                for i in 0..k {
                    let row = dx_base + (oh * k + i) * in_w + ow * k;
                    for j in 0..k {
                        dx[row + j] = g;
                    }
                }
            }
        }
    }
    dx
}

/// Numerically stable row-wise log-softmax of a `(rows x cols)` matrix.
pub fn log_softmax(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f32>().ln();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}
