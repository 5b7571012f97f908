//! Differentiable ops.
//!
//! Elementwise ops require exactly matching shapes — there is no implicit
//! broadcasting anywhere in this crate; the few places that need a
//! broadcast-like pattern (bias add, per-channel affine) are folded into the
//! structured ops that need them (`conv2d`, `batchnorm2d`).

use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

/// Split a shape around `axis` into (outer, mid, inner) extents so element
/// `(o, m, i)` lives at offset `(o * mid + m) * inner + i`.
fn axis_parts(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, mid, inner))
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| *a + *b)
            .collect();
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|args| {
                vec![
                    Some(args.grad_out.to_vec()),
                    Some(args.grad_out.to_vec()),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| *a - *b)
            .collect();
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|args| {
                vec![
                    Some(args.grad_out.to_vec()),
                    Some(args.grad_out.iter().map(|g| -*g).collect()),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| *a * *b)
            .collect();
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|args| {
                let a = args.parents[0].data();
                let b = args.parents[1].data();
                let ga = args
                    .grad_out
                    .iter()
                    .zip(b.iter())
                    .map(|(g, b)| *g * *b)
                    .collect();
                let gb = args
                    .grad_out
                    .iter()
                    .zip(a.iter())
                    .map(|(g, a)| *g * *a)
                    .collect();
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn neg(&self) -> Result<Tensor<S>> {
        let data = self.data().iter().map(|a| -*a).collect();
        Tensor::from_op(
            "neg",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|args| vec![Some(args.grad_out.iter().map(|g| -*g).collect())]),
        )
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&self, c: f64) -> Result<Tensor<S>> {
        let c = S::from_f64_lossy(c);
        let data = self.data().iter().map(|a| *a * c).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |args| vec![Some(args.grad_out.iter().map(|g| *g * c).collect())]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor<S>> {
        let c = S::from_f64_lossy(c);
        let data = self.data().iter().map(|a| *a + c).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|args| vec![Some(args.grad_out.to_vec())]),
        )
    }

    /// `c - x`, elementwise.
    pub fn rsub_scalar(&self, c: f64) -> Result<Tensor<S>> {
        let c = S::from_f64_lossy(c);
        let data = self.data().iter().map(|a| c - *a).collect();
        Tensor::from_op(
            "rsub_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|args| vec![Some(args.grad_out.iter().map(|g| -*g).collect())]),
        )
    }

    /// `x^c` for a scalar exponent. Negative bases with fractional exponents
    /// surface as a non-finite-output error.
    pub fn pow_scalar(&self, c: f64) -> Result<Tensor<S>> {
        let cs = S::from_f64_lossy(c);
        let data = self.data().iter().map(|a| a.powf(cs)).collect();
        Tensor::from_op(
            "pow_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |args| {
                let x = args.parents[0].data();
                let g = args
                    .grad_out
                    .iter()
                    .zip(x.iter())
                    .map(|(g, x)| *g * cs * x.powf(cs - S::one()))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// Natural log. Non-positive inputs surface as a non-finite-output error.
    pub fn log(&self) -> Result<Tensor<S>> {
        let data = self.data().iter().map(|a| a.ln()).collect();
        Tensor::from_op(
            "log",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|args| {
                let x = args.parents[0].data();
                let g = args
                    .grad_out
                    .iter()
                    .zip(x.iter())
                    .map(|(g, x)| *g / *x)
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn relu(&self) -> Result<Tensor<S>> {
        let data = self
            .data()
            .iter()
            .map(|a| if *a > S::zero() { *a } else { S::zero() })
            .collect();
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|args| {
                let x = args.parents[0].data();
                let g = args
                    .grad_out
                    .iter()
                    .zip(x.iter())
                    .map(|(g, x)| if *x > S::zero() { *g } else { S::zero() })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor<S>> {
        let one = S::one();
        let data = self
            .data()
            .iter()
            .map(|a| one / (one + (-*a).exp()))
            .collect();
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |args| {
                let g = args
                    .grad_out
                    .iter()
                    .zip(args.out.iter())
                    .map(|(g, y)| *g * *y * (one - *y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&self) -> Result<Tensor<S>> {
        let data = self.data().iter().map(|a| a.abs()).collect();
        Tensor::from_op(
            "abs",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|args| {
                let x = args.parents[0].data();
                let g = args
                    .grad_out
                    .iter()
                    .zip(x.iter())
                    .map(|(g, x)| {
                        if *x > S::zero() {
                            *g
                        } else if *x < S::zero() {
                            -*g
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// Clamp into `[lo, hi]`; gradient passes only through the strict
    /// interior (clamped or boundary entries get zero gradient).
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor<S>> {
        if !(lo <= hi) {
            return Err(TensorError::Invalid {
                op: "clamp",
                detail: format!("invalid bounds [{lo}, {hi}]"),
            });
        }
        let (ls, hs) = (S::from_f64_lossy(lo), S::from_f64_lossy(hi));
        let data = self
            .data()
            .iter()
            .map(|a| a.max(ls).min(hs))
            .collect();
        Tensor::from_op(
            "clamp",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |args| {
                let x = args.parents[0].data();
                let g = args
                    .grad_out
                    .iter()
                    .zip(x.iter())
                    .map(|(g, x)| {
                        if *x > ls && *x < hs {
                            *g
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// Sum of all elements into a 1-element tensor.
    pub fn sum_all(&self) -> Result<Tensor<S>> {
        let mut acc = S::zero();
        for v in self.data().iter() {
            acc += *v;
        }
        let n = self.len();
        Tensor::from_op(
            "sum_all",
            vec![1],
            vec![acc],
            vec![self.clone()],
            Box::new(move |args| vec![Some(vec![args.grad_out[0]; n])]),
        )
    }

    /// Mean along one axis; the axis is removed from the shape
    /// (a leading singleton is kept for rank-1 inputs).
    pub fn mean_over_axis(&self, axis: usize) -> Result<Tensor<S>> {
        let (outer, mid, inner) = axis_parts("mean_over_axis", self.shape(), axis)?;
        let mut out_shape: Vec<usize> = self.shape().to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let inv = S::one() / S::from_usize(mid).expect("axis extent");
        let x = self.data();
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let row = &x[base..base + inner];
                let acc = &mut data[o * inner..(o + 1) * inner];
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += *v;
                }
            }
        }
        for a in data.iter_mut() {
            *a *= inv;
        }
        drop(x);
        Tensor::from_op(
            "mean_over_axis",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |args| {
                let mut g = vec![S::zero(); outer * mid * inner];
                for o in 0..outer {
                    let up = &args.grad_out[o * inner..(o + 1) * inner];
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for (gi, u) in g[base..base + inner].iter_mut().zip(up) {
                            *gi = *u * inv;
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Max along one axis. Returns the reduced tensor (axis removed; rank-1
    /// inputs keep a singleton) plus the within-axis argmax per output
    /// element. Gradient is routed to the argmax entry; on exact ties the
    /// first (lowest-index) entry wins.
    pub fn max_over_axis(&self, axis: usize) -> Result<(Tensor<S>, Vec<u32>)> {
        let (outer, mid, inner) = axis_parts("max_over_axis", self.shape(), axis)?;
        let mut out_shape: Vec<usize> = self.shape().to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let x = self.data();
        let mut data = vec![S::zero(); outer * inner];
        let mut argmax = vec![0u32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = x[(o * mid) * inner + i];
                let mut best_m = 0u32;
                for m in 1..mid {
                    let v = x[(o * mid + m) * inner + i];
                    if v > best {
                        best = v;
                        best_m = m as u32;
                    }
                }
                data[o * inner + i] = best;
                argmax[o * inner + i] = best_m;
            }
        }
        drop(x);
        let routing = argmax.clone();
        let tensor = Tensor::from_op(
            "max_over_axis",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |args| {
                let mut g = vec![S::zero(); outer * mid * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let m = routing[o * inner + i] as usize;
                        g[(o * mid + m) * inner + i] = args.grad_out[o * inner + i];
                    }
                }
                vec![Some(g)]
            }),
        )?;
        Ok((tensor, argmax))
    }

    /// Softmax along one axis (numerically stabilized by max subtraction).
    pub fn softmax_over_axis(&self, axis: usize) -> Result<Tensor<S>> {
        let (outer, mid, inner) = axis_parts("softmax_over_axis", self.shape(), axis)?;
        let x = self.data();
        let mut data = vec![S::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |m: usize| (o * mid + m) * inner + i;
                let mut mx = x[at(0)];
                for m in 1..mid {
                    mx = mx.max(x[at(m)]);
                }
                let mut denom = S::zero();
                for m in 0..mid {
                    let e = (x[at(m)] - mx).exp();
                    data[at(m)] = e;
                    denom += e;
                }
                for m in 0..mid {
                    data[at(m)] /= denom;
                }
            }
        }
        drop(x);
        Tensor::from_op(
            "softmax_over_axis",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |args| {
                let y = args.out;
                let mut g = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |m: usize| (o * mid + m) * inner + i;
                        let mut dot = S::zero();
                        for m in 0..mid {
                            dot += args.grad_out[at(m)] * y[at(m)];
                        }
                        for m in 0..mid {
                            g[at(m)] = y[at(m)] * (args.grad_out[at(m)] - dot);
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Same data, new shape (element counts must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        let n: usize = shape.iter().product();
        if n != self.len() || shape.iter().any(|&d| d == 0) || shape.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(), shape),
            });
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.values(),
            vec![self.clone()],
            Box::new(|args| vec![Some(args.grad_out.to_vec())]),
        )
    }
}

/// Concatenate along `axis`; all other extents must match.
pub fn concat<S: Scalar>(tensors: &[Tensor<S>], axis: usize) -> Result<Tensor<S>> {
    let Some(first) = tensors.first() else {
        return Err(TensorError::Invalid {
            op: "concat",
            detail: "no inputs".into(),
        });
    };
    let rank = first.rank();
    if axis >= rank {
        return Err(TensorError::AxisOutOfRange {
            op: "concat",
            axis,
            rank,
        });
    }
    let mut out_shape = first.shape().to_vec();
    for t in &tensors[1..] {
        if t.rank() != rank {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                detail: format!("rank {} vs {}", t.rank(), rank),
            });
        }
        for (d, (&a, &b)) in first.shape().iter().zip(t.shape()).enumerate() {
            if d != axis && a != b {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} vs {:?} (axis {axis})", first.shape(), t.shape()),
                });
            }
        }
        out_shape[axis] += t.shape()[axis];
    }

    let outer: usize = out_shape[..axis].iter().product();
    let inner_tail: usize = out_shape[axis + 1..].iter().product();
    let blocks: Vec<usize> = tensors
        .iter()
        .map(|t| t.shape()[axis] * inner_tail)
        .collect();
    let out_block: usize = blocks.iter().sum();

    let mut data = vec![S::zero(); outer * out_block];
    for o in 0..outer {
        let mut off = o * out_block;
        for (t, &b) in tensors.iter().zip(&blocks) {
            let src = t.data();
            data[off..off + b].copy_from_slice(&src[o * b..(o + 1) * b]);
            off += b;
        }
    }

    let blocks_back = blocks.clone();
    Tensor::from_op(
        "concat",
        out_shape,
        data,
        tensors.to_vec(),
        Box::new(move |args| {
            let mut grads: Vec<Vec<S>> = blocks_back.iter().map(|&b| vec![S::zero(); outer * b]).collect();
            for o in 0..outer {
                let mut off = o * out_block;
                for (gi, &b) in grads.iter_mut().zip(&blocks_back) {
                    gi[o * b..(o + 1) * b].copy_from_slice(&args.grad_out[off..off + b]);
                    off += b;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    )
}

/// 2D convolution over NCHW input with an OCKK kernel.
///
/// `padding` zero-pads symmetrically; output spatial extent is
/// `(in + 2*pad - k) / stride + 1` and must be positive.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    if input.rank() != 4 || weight.rank() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!(
                "need NCHW input and OCKK weight, got {:?} and {:?}",
                input.shape(),
                weight.shape()
            ),
        });
    }
    if stride == 0 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            detail: "stride must be positive".into(),
        });
    }
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (oc, wc, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wc != c {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input has {c} channels, weight expects {wc}"),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [oc] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias shape {:?}, want [{oc}]", b.shape()),
            });
        }
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})"),
        });
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;

    let x = input.data();
    let wt = weight.data();
    let mut out = vec![S::zero(); n * oc * oh * ow];

    if let Some(b) = bias {
        let bv = b.data();
        for ni in 0..n {
            for o in 0..oc {
                let base = (ni * oc + o) * oh * ow;
                let v = bv[o];
                for e in out[base..base + oh * ow].iter_mut() {
                    *e = v;
                }
            }
        }
    }

    for ni in 0..n {
        for o in 0..oc {
            let out_base = (ni * oc + o) * oh * ow;
            for ci in 0..c {
                let in_base = (ni * c + ci) * h * w;
                let w_base = (o * c + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[w_base + ky * kw + kx];
                        if wv == S::zero() {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = in_base + iy as usize * w;
                            let out_row = out_base + oy * ow;
                            if stride == 1 {
                                // ix = ox + kx - padding must fall in [0, w)
                                let lo = padding.saturating_sub(kx);
                                let hi = (w + padding - kx).min(ow);
                                if lo >= hi {
                                    continue;
                                }
                                let ioff = (in_row + lo + kx) as isize - padding as isize;
                                let src = &x[ioff as usize..ioff as usize + (hi - lo)];
                                let dst = &mut out[out_row + lo..out_row + hi];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * *s;
                                }
                            } else {
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    out[out_row + ox] += wv * x[in_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    drop(x);
    drop(wt);

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    let dims = (n, c, h, w, oc, kh, kw, oh, ow, stride, padding);

    Tensor::from_op(
        "conv2d",
        vec![n, oc, oh, ow],
        out,
        parents,
        Box::new(move |args| {
            let (n, c, h, w, oc, kh, kw, oh, ow, stride, padding) = dims;
            let x = args.parents[0].data();
            let wt = args.parents[1].data();
            let g = args.grad_out;

            let mut dx = vec![S::zero(); n * c * h * w];
            let mut dw = vec![S::zero(); oc * c * kh * kw];

            for ni in 0..n {
                for o in 0..oc {
                    let out_base = (ni * oc + o) * oh * ow;
                    for ci in 0..c {
                        let in_base = (ni * c + ci) * h * w;
                        let w_base = (o * c + ci) * kh * kw;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = wt[w_base + ky * kw + kx];
                                let mut wacc = S::zero();
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let in_row = in_base + iy as usize * w;
                                    let out_row = out_base + oy * ow;
                                    if stride == 1 {
                                        let lo = padding.saturating_sub(kx);
                                        let hi = (w + padding - kx).min(ow);
                                        if lo >= hi {
                                            continue;
                                        }
                                        let ioff = in_row + lo + kx - padding;
                                        let grow = &g[out_row + lo..out_row + hi];
                                        let xrow = &x[ioff..ioff + (hi - lo)];
                                        for (gv, xv) in grow.iter().zip(xrow) {
                                            wacc += *gv * *xv;
                                        }
                                        let drow = &mut dx[ioff..ioff + (hi - lo)];
                                        for (dv, gv) in drow.iter_mut().zip(grow) {
                                            *dv += wv * *gv;
                                        }
                                    } else {
                                        for ox in 0..ow {
                                            let ix =
                                                (ox * stride + kx) as isize - padding as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let gv = g[out_row + ox];
                                            wacc += gv * x[in_row + ix as usize];
                                            dx[in_row + ix as usize] += wv * gv;
                                        }
                                    }
                                }
                                dw[w_base + ky * kw + kx] += wacc;
                            }
                        }
                    }
                }
            }

            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                let mut db = vec![S::zero(); oc];
                for ni in 0..n {
                    for o in 0..oc {
                        let base = (ni * oc + o) * oh * ow;
                        let mut acc = S::zero();
                        for v in &g[base..base + oh * ow] {
                            acc += *v;
                        }
                        db[o] += acc;
                    }
                }
                grads.push(Some(db));
            }
            grads
        }),
    )
}

/// Whether batch norm uses batch statistics (and updates the running ones)
/// or the frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch normalization over NCHW input.
///
/// Train mode normalizes by biased batch statistics over `N*H*W` per channel
/// and folds them into the running statistics with the given momentum
/// (`running = (1 - momentum) * running + momentum * batch`). Eval mode
/// normalizes by the frozen running statistics; gradients then flow through
/// the affine transform only.
///
/// `running_mean` / `running_var` are plain (non-gradient) tensors of shape
/// `[C]` that this op mutates in place in train mode.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    momentum: S,
    eps: S,
    mode: BnMode,
) -> Result<Tensor<S>> {
    if input.rank() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm2d",
            detail: format!("need NCHW input, got {:?}", input.shape()),
        });
    }
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm2d",
            detail: format!(
                "gamma {:?} / beta {:?} must both be [{c}]",
                gamma.shape(),
                beta.shape()
            ),
        });
    }
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm2d",
            detail: "running statistics length must equal channel count".into(),
        });
    }
    if running_mean.requires_grad() || running_var.requires_grad() {
        return Err(TensorError::Invalid {
            op: "batchnorm2d",
            detail: "running statistics must not carry gradients".into(),
        });
    }
    let reduce = n * h * w;
    if reduce == 0 {
        return Err(TensorError::Invalid {
            op: "batchnorm2d",
            detail: "zero-size batch in train mode".into(),
        });
    }

    let x = input.data();
    let gm = gamma.data();
    let bt = beta.data();
    let plane = h * w;

    // Per-channel mean / inverse std actually used for normalization.
    let mut mean = vec![S::zero(); c];
    let mut inv_std = vec![S::zero(); c];
    match mode {
        BnMode::Train => {
            let inv_r = S::one() / S::from_usize(reduce).expect("reduce count");
            let mut var = vec![S::zero(); c];
            for ci in 0..c {
                let mut acc = S::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for v in &x[base..base + plane] {
                        acc += *v;
                    }
                }
                let m = acc * inv_r;
                let mut vacc = S::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for v in &x[base..base + plane] {
                        let d = *v - m;
                        vacc += d * d;
                    }
                }
                mean[ci] = m;
                var[ci] = vacc * inv_r;
                inv_std[ci] = S::one() / (var[ci] + eps).sqrt();
            }
            let one_m = S::one() - momentum;
            running_mean.update_data(|rm| {
                for ci in 0..c {
                    rm[ci] = one_m * rm[ci] + momentum * mean[ci];
                }
            });
            running_var.update_data(|rv| {
                for ci in 0..c {
                    rv[ci] = one_m * rv[ci] + momentum * var[ci];
                }
            });
        }
        BnMode::Eval => {
            let rm = running_mean.data();
            let rv = running_var.data();
            for ci in 0..c {
                mean[ci] = rm[ci];
                inv_std[ci] = S::one() / (rv[ci] + eps).sqrt();
            }
        }
    }

    let mut xhat = vec![S::zero(); x.len()];
    let mut out = vec![S::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let (m, is, g, b) = (mean[ci], inv_std[ci], gm[ci], bt[ci]);
            for k in base..base + plane {
                let xh = (x[k] - m) * is;
                xhat[k] = xh;
                out[k] = g * xh + b;
            }
        }
    }
    drop(x);
    drop(gm);
    drop(bt);

    let train = mode == BnMode::Train;
    Tensor::from_op(
        "batchnorm2d",
        input.shape().to_vec(),
        out,
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(move |args| {
            let g = args.grad_out;
            let gm = args.parents[1].data();
            let mut dx = vec![S::zero(); g.len()];
            let mut dgamma = vec![S::zero(); c];
            let mut dbeta = vec![S::zero(); c];
            let inv_r = S::one() / S::from_usize(reduce).expect("reduce count");
            for ci in 0..c {
                let mut sum_g = S::zero();
                let mut sum_gx = S::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for k in base..base + plane {
                        sum_g += g[k];
                        sum_gx += g[k] * xhat[k];
                    }
                }
                dgamma[ci] = sum_gx;
                dbeta[ci] = sum_g;
                let scale = gm[ci] * inv_std[ci];
                if train {
                    let mg = sum_g * inv_r;
                    let mgx = sum_gx * inv_r;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for k in base..base + plane {
                            dx[k] = scale * (g[k] - mg - xhat[k] * mgx);
                        }
                    }
                } else {
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for k in base..base + plane {
                            dx[k] = scale * g[k];
                        }
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }),
    )
}

/// One (camera, pixel, depth-bin) → BEV-cell assignment used by the fused
/// view-transform op. `pix` is a flat index into the `h*w` (or compressed
/// `1*w`) pixel grid of that camera.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransportRecord {
    pub cam: u32,
    pub pix: u32,
    pub bin: u32,
    pub cell: u32,
}

/// Fused camera-to-BEV transport: for each record,
/// `out[c, cell] += features[cam, c, pix] * depth[cam, bin, pix]`.
///
/// `features` is `(N, C, h, w)`, `depth` is `(N, D, h, w)` with matching
/// `h*w`; output is `(C, bev_h, bev_w)`. Records are applied in order, so
/// the accumulation is deterministic. Gradients flow into both inputs.
pub fn bev_transport<S: Scalar>(
    features: &Tensor<S>,
    depth: &Tensor<S>,
    records: &[TransportRecord],
    bev_hw: (usize, usize),
) -> Result<Tensor<S>> {
    if features.rank() != 4 || depth.rank() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "bev_transport",
            detail: format!(
                "need rank-4 features/depth, got {:?} and {:?}",
                features.shape(),
                depth.shape()
            ),
        });
    }
    let (n, c, fh, fw) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
        features.shape()[3],
    );
    let (dn, d, dh, dw) = (
        depth.shape()[0],
        depth.shape()[1],
        depth.shape()[2],
        depth.shape()[3],
    );
    if n != dn || fh * fw != dh * dw {
        return Err(TensorError::ShapeMismatch {
            op: "bev_transport",
            detail: format!(
                "features {:?} and depth {:?} disagree on cameras or pixels",
                features.shape(),
                depth.shape()
            ),
        });
    }
    let pix = fh * fw;
    let cells = bev_hw.0 * bev_hw.1;
    for r in records {
        if (r.cam as usize) >= n
            || (r.pix as usize) >= pix
            || (r.bin as usize) >= d
            || (r.cell as usize) >= cells
        {
            return Err(TensorError::Invalid {
                op: "bev_transport",
                detail: format!("record out of range: {r:?}"),
            });
        }
    }

    let f = features.data();
    let p = depth.data();
    let mut out = vec![S::zero(); c * cells];
    for r in records {
        let (cam, px, bin, cell) = (
            r.cam as usize,
            r.pix as usize,
            r.bin as usize,
            r.cell as usize,
        );
        let dv = p[(cam * d + bin) * pix + px];
        if dv == S::zero() {
            continue;
        }
        for ci in 0..c {
            out[ci * cells + cell] += f[(cam * c + ci) * pix + px] * dv;
        }
    }
    drop(f);
    drop(p);

    let records: Vec<TransportRecord> = records.to_vec();
    Tensor::from_op(
        "bev_transport",
        vec![c, bev_hw.0, bev_hw.1],
        out,
        vec![features.clone(), depth.clone()],
        Box::new(move |args| {
            let f = args.parents[0].data();
            let p = args.parents[1].data();
            let g = args.grad_out;
            let mut df = vec![S::zero(); f.len()];
            let mut dp = vec![S::zero(); p.len()];
            for r in &records {
                let (cam, px, bin, cell) = (
                    r.cam as usize,
                    r.pix as usize,
                    r.bin as usize,
                    r.cell as usize,
                );
                let dv = p[(cam * d + bin) * pix + px];
                let mut dacc = S::zero();
                for ci in 0..c {
                    let gv = g[ci * cells + cell];
                    df[(cam * c + ci) * pix + px] += gv * dv;
                    dacc += gv * f[(cam * c + ci) * pix + px];
                }
                dp[(cam * d + bin) * pix + px] += dacc;
            }
            vec![Some(df), Some(dp)]
        }),
    )
}

/// Scatter per-cell feature columns `(C, B)` onto a `(C, H, W)` grid.
/// `cells[b]` gives the flat target cell for column `b` (`None` drops it);
/// collisions accumulate in column order.
pub fn scatter_to_grid<S: Scalar>(
    input: &Tensor<S>,
    cells: &[Option<u32>],
    grid_hw: (usize, usize),
) -> Result<Tensor<S>> {
    if input.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "scatter_to_grid",
            detail: format!("need (C, B) input, got {:?}", input.shape()),
        });
    }
    let (c, b) = (input.shape()[0], input.shape()[1]);
    if cells.len() != b {
        return Err(TensorError::Invalid {
            op: "scatter_to_grid",
            detail: format!("{} cell indices for {b} columns", cells.len()),
        });
    }
    let n_cells = grid_hw.0 * grid_hw.1;
    for cell in cells.iter().flatten() {
        if *cell as usize >= n_cells {
            return Err(TensorError::Invalid {
                op: "scatter_to_grid",
                detail: format!("cell {cell} out of range (grid {grid_hw:?})"),
            });
        }
    }
    let x = input.data();
    let mut out = vec![S::zero(); c * n_cells];
    for (bi, cell) in cells.iter().enumerate() {
        let Some(cell) = cell else { continue };
        let cell = *cell as usize;
        for ci in 0..c {
            out[ci * n_cells + cell] += x[ci * b + bi];
        }
    }
    drop(x);

    let cells: Vec<Option<u32>> = cells.to_vec();
    Tensor::from_op(
        "scatter_to_grid",
        vec![c, grid_hw.0, grid_hw.1],
        out,
        vec![input.clone()],
        Box::new(move |args| {
            let mut dx = vec![S::zero(); c * b];
            for (bi, cell) in cells.iter().enumerate() {
                let Some(cell) = cell else { continue };
                let cell = *cell as usize;
                for ci in 0..c {
                    dx[ci * b + bi] = args.grad_out[ci * n_cells + cell];
                }
            }
            vec![Some(dx)]
        }),
    )
}

/// Gather cells from a `(C, H, W)` map into a new `(C, H', W')` map:
/// `out[c, i] = input[c, index[i]]`, zero where `index[i]` is `None`.
/// Used to warp BEV features under in-plane augmentation.
pub fn gather_cells<S: Scalar>(
    input: &Tensor<S>,
    index: &[Option<u32>],
    out_hw: (usize, usize),
) -> Result<Tensor<S>> {
    if input.rank() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "gather_cells",
            detail: format!("need (C, H, W) input, got {:?}", input.shape()),
        });
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let in_cells = h * w;
    let out_cells = out_hw.0 * out_hw.1;
    if index.len() != out_cells {
        return Err(TensorError::Invalid {
            op: "gather_cells",
            detail: format!("{} indices for {out_cells} output cells", index.len()),
        });
    }
    for src in index.iter().flatten() {
        if *src as usize >= in_cells {
            return Err(TensorError::Invalid {
                op: "gather_cells",
                detail: format!("source cell {src} out of range"),
            });
        }
    }
    let x = input.data();
    let mut out = vec![S::zero(); c * out_cells];
    for (i, src) in index.iter().enumerate() {
        let Some(src) = src else { continue };
        let src = *src as usize;
        for ci in 0..c {
            out[ci * out_cells + i] = x[ci * in_cells + src];
        }
    }
    drop(x);

    let index: Vec<Option<u32>> = index.to_vec();
    Tensor::from_op(
        "gather_cells",
        vec![c, out_hw.0, out_hw.1],
        out,
        vec![input.clone()],
        Box::new(move |args| {
            let mut dx = vec![S::zero(); c * in_cells];
            for (i, src) in index.iter().enumerate() {
                let Some(src) = src else { continue };
                let src = *src as usize;
                for ci in 0..c {
                    dx[ci * in_cells + src] += args.grad_out[ci * out_cells + i];
                }
            }
            vec![Some(dx)]
        }),
    )
}
