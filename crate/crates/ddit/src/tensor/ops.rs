//! Forward operations. Each constructs a fresh graph node; inputs are never
//! mutated. When no input is grad-enabled the node is stored as a leaf so the
//! upstream graph can be dropped immediately (sampling and analysis run this
//! way for free).

use super::{ensure_finite, fresh_id, Node, Op, TensorValue};
use crate::error::{Error, Result};
use rayon::prelude::*;
use std::sync::Arc;

/// Below this many multiply-adds a matmul stays single-threaded; rayon's
/// spawn overhead dominates under it.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// Dot product with four independent FMA lanes in a fixed order: fast and
/// bitwise reproducible.
#[inline]
pub(crate) fn dot_fixed(a: &[f64], b: &[f64]) -> f64 {
    let chunks = a.len() / 4;
    let mut acc = [0.0f64; 4];
    for i in 0..chunks {
        let (xa, xb) = (&a[i * 4..i * 4 + 4], &b[i * 4..i * 4 + 4]);
        acc[0] = xa[0].mul_add(xb[0], acc[0]);
        acc[1] = xa[1].mul_add(xb[1], acc[1]);
        acc[2] = xa[2].mul_add(xb[2], acc[2]);
        acc[3] = xa[3].mul_add(xb[3], acc[3]);
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn make_node(
    shape: Vec<usize>,
    data: Vec<f64>,
    grad_enabled: bool,
    op: Op,
    name: &'static str,
) -> Result<TensorValue> {
    ensure_finite(&data, name)?;
    let op = if grad_enabled { op } else { Op::Leaf };
    Ok(TensorValue {
        node: Arc::new(Node {
            id: fresh_id(),
            shape,
            data,
            grad_enabled,
            op,
        }),
    })
}

fn shape_err(op: &'static str, details: String) -> Error {
    Error::ShapeMismatch { op, details }
}

// ── raw matmul kernels ─────────────────────────────────────────────────────
//
// All three parallelize over output rows only; within a row the accumulation
// order is fixed, so results are bitwise identical for any thread count.

/// C[m,n] = A[m,k] · B[k,n], written into `c`.
pub(crate) fn mm_nn_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    let body = |(i, row): (usize, &mut [f64])| {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv = av.mul_add(*bv, *cv);
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        c.chunks_mut(n).enumerate().for_each(body);
    }
}

/// C[m,n] = A[m,k] · B[k,n]
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    mm_nn_into(a, b, m, k, n, &mut c);
    c
}

/// C[m,k] = A[m,n] · B[k,n]ᵀ
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    let body = |(i, row): (usize, &mut [f64])| {
        let arow = &a[i * n..(i + 1) * n];
        for (p, cv) in row.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *cv = dot_fixed(arow, brow);
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(k).enumerate().for_each(body);
    } else {
        c.chunks_mut(k).enumerate().for_each(body);
    }
    c
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    let body = |(p, row): (usize, &mut [f64])| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv = av.mul_add(*bv, *cv);
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && k > 1 {
        c.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        c.chunks_mut(n).enumerate().for_each(body);
    }
    c
}

// ── elementwise binary with scalar broadcast ───────────────────────────────

fn binary_forward(
    a: &TensorValue,
    b: &TensorValue,
    name: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        let out = ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
        Ok((a.shape().to_vec(), out))
    } else if b.numel() == 1 {
        let y = bd[0];
        Ok((a.shape().to_vec(), ad.iter().map(|&x| f(x, y)).collect()))
    } else if a.numel() == 1 {
        let x = ad[0];
        Ok((b.shape().to_vec(), bd.iter().map(|&y| f(x, y)).collect()))
    } else {
        Err(shape_err(
            name,
            format!("{:?} vs {:?} (only scalar broadcast allowed)", a.shape(), b.shape()),
        ))
    }
}

macro_rules! binary_op {
    ($method:ident, $variant:ident, $name:literal, $f:expr) => {
        pub fn $method(&self, other: &TensorValue) -> Result<TensorValue> {
            let (shape, data) = binary_forward(self, other, $name, $f)?;
            make_node(
                shape,
                data,
                self.requires_grad() || other.requires_grad(),
                Op::$variant(self.node.clone(), other.node.clone()),
                $name,
            )
        }
    };
}

impl TensorValue {
    binary_op!(add, Add, "add", |x, y| x + y);
    binary_op!(sub, Sub, "sub", |x, y| x - y);
    binary_op!(mul, Mul, "mul", |x, y| x * y);
    binary_op!(div, Div, "div", |x, y| x / y);

    pub fn add_scalar(&self, c: f64) -> Result<TensorValue> {
        let data = self.data().iter().map(|&x| x + c).collect();
        make_node(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::AddScalar(self.node.clone()),
            "add_scalar",
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Result<TensorValue> {
        let data = self.data().iter().map(|&x| x * c).collect();
        make_node(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::MulScalar(self.node.clone(), c),
            "mul_scalar",
        )
    }

    pub fn neg(&self) -> Result<TensorValue> {
        self.mul_scalar(-1.0)
    }

    /// Adds a `[d]` vector to every row of a `[..., d]` tensor.
    pub fn add_bias(&self, bias: &TensorValue) -> Result<TensorValue> {
        let d = *self.shape().last().ok_or_else(|| {
            shape_err("add_bias", "input must have at least one axis".into())
        })?;
        if bias.shape() != [d] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} does not match last axis {d}", bias.shape()),
            ));
        }
        let bd = bias.data();
        let data = self
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &b)| x + b))
            .collect();
        make_node(
            self.shape().to_vec(),
            data,
            self.requires_grad() || bias.requires_grad(),
            Op::AddBias {
                x: self.node.clone(),
                bias: bias.node.clone(),
            },
            "add_bias",
        )
    }

    /// Standard matrix product of `[m,k]` by `[k,n]`.
    pub fn matmul(&self, other: &TensorValue) -> Result<TensorValue> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = mm_nn(self.data(), other.data(), m, k, n);
        make_node(
            vec![m, n],
            data,
            self.requires_grad() || other.requires_grad(),
            Op::MatMul {
                a: self.node.clone(),
                b: other.node.clone(),
            },
            "matmul",
        )
    }

    /// Batched matrix product of `[B,m,k]` by `[B,k,n]`.
    pub fn bmm(&self, other: &TensorValue) -> Result<TensorValue> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", format!("{sa:?} × {sb:?}")));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; bsz * m * n];
        let a = self.data();
        let b = other.data();
        let body = |(bi, out): (usize, &mut [f64])| {
            let ab = &a[bi * m * k..(bi + 1) * m * k];
            let bb = &b[bi * k * n..(bi + 1) * k * n];
            mm_nn_into(ab, bb, m, k, n, out);
        };
        if bsz * m * k * n >= PAR_FLOP_THRESHOLD && bsz > 1 {
            data.par_chunks_mut(m * n).enumerate().for_each(body);
        } else {
            data.chunks_mut(m * n).enumerate().for_each(body);
        }
        make_node(
            vec![bsz, m, n],
            data,
            self.requires_grad() || other.requires_grad(),
            Op::Bmm {
                a: self.node.clone(),
                b: other.node.clone(),
            },
            "bmm",
        )
    }

    /// Swaps two axes (copying permutation).
    pub fn transpose(&self, ax0: usize, ax1: usize) -> Result<TensorValue> {
        let nd = self.shape().len();
        if ax0 >= nd || ax1 >= nd {
            return Err(shape_err(
                "transpose",
                format!("axes ({ax0},{ax1}) out of range for rank {nd}"),
            ));
        }
        let mut out_shape = self.shape().to_vec();
        out_shape.swap(ax0, ax1);
        let data = permute_swap(self.data(), self.shape(), ax0, ax1);
        make_node(
            out_shape,
            data,
            self.requires_grad(),
            Op::Transpose {
                x: self.node.clone(),
                ax0,
                ax1,
            },
            "transpose",
        )
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<TensorValue> {
        let expected: usize = shape.iter().product();
        if expected != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        make_node(
            shape,
            self.data().to_vec(),
            self.requires_grad(),
            Op::Reshape(self.node.clone()),
            "reshape",
        )
    }

    /// Sum over the named axes; reduced axes are removed from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<TensorValue> {
        self.reduce_axes(axes, 1.0, "sum_axes")
    }

    /// Arithmetic mean over the named axes.
    pub fn mean_axes(&self, axes: &[usize]) -> Result<TensorValue> {
        let count: usize = axes
            .iter()
            .map(|&a| self.shape().get(a).copied().unwrap_or(1))
            .product();
        self.reduce_axes(axes, 1.0 / count.max(1) as f64, "mean_axes")
    }

    pub fn sum_all(&self) -> Result<TensorValue> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&axes)
    }

    pub fn mean_all(&self) -> Result<TensorValue> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.mean_axes(&axes)
    }

    fn reduce_axes(&self, axes: &[usize], scale: f64, name: &'static str) -> Result<TensorValue> {
        let nd = self.shape().len();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.is_empty() || axes.iter().any(|&a| a >= nd) {
            return Err(shape_err(
                name,
                format!("axes {axes:?} invalid for rank {nd}"),
            ));
        }
        let out_shape: Vec<usize> = self
            .shape()
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &e)| e)
            .collect();
        let out_numel: usize = out_shape.iter().product::<usize>().max(1);
        let mut out = vec![0.0; out_numel];
        let data = self.data();
        ReduceMap::new(self.shape(), &axes).for_each(|i, o| out[o] += data[i]);
        for v in &mut out {
            *v *= scale;
        }
        make_node(
            out_shape,
            out,
            self.requires_grad(),
            Op::SumAxes {
                x: self.node.clone(),
                axes,
                scale,
            },
            name,
        )
    }

    /// Concatenates along the last axis; all leading extents must match.
    pub fn concat_last(&self, other: &TensorValue) -> Result<TensorValue> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != sb.len()
            || sa.is_empty()
            || sa[..sa.len() - 1] != sb[..sb.len() - 1]
        {
            return Err(shape_err("concat_last", format!("{sa:?} ++ {sb:?}")));
        }
        let (la, lb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.numel() / la.max(1);
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = la + lb;
        let mut data = Vec::with_capacity(rows * (la + lb));
        for r in 0..rows {
            data.extend_from_slice(&self.data()[r * la..(r + 1) * la]);
            data.extend_from_slice(&other.data()[r * lb..(r + 1) * lb]);
        }
        make_node(
            out_shape,
            data,
            self.requires_grad() || other.requires_grad(),
            Op::ConcatLast(self.node.clone(), other.node.clone()),
            "concat_last",
        )
    }

    /// Contiguous slice `[start, start+len)` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<TensorValue> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| shape_err("slice_last", "rank 0 input".into()))?;
        if start + len > d || len == 0 {
            return Err(shape_err(
                "slice_last",
                format!("[{start}, {}) out of last axis {d}", start + len),
            ));
        }
        let rows = self.numel() / d;
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = len;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.data()[r * d + start..r * d + start + len]);
        }
        make_node(
            out_shape,
            data,
            self.requires_grad(),
            Op::SliceLast {
                x: self.node.clone(),
                start,
                len,
            },
            "slice_last",
        )
    }

    /// Gathers rows of a `[v, ...]` tensor; gradient scatters back, with
    /// repeated ids accumulating.
    pub fn index_select0(&self, ids: &[usize]) -> Result<TensorValue> {
        let v = *self
            .shape()
            .first()
            .ok_or_else(|| shape_err("index_select0", "rank 0 input".into()))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!(
                "index {bad} out of range for axis of extent {v}"
            )));
        }
        let row = self.numel() / v.max(1);
        let mut out_shape = self.shape().to_vec();
        out_shape[0] = ids.len();
        let mut data = Vec::with_capacity(ids.len() * row);
        for &i in ids {
            data.extend_from_slice(&self.data()[i * row..(i + 1) * row]);
        }
        make_node(
            out_shape,
            data,
            self.requires_grad(),
            Op::IndexSelect0 {
                x: self.node.clone(),
                ids: ids.to_vec(),
            },
            "index_select0",
        )
    }

    /// Softmax over the last axis; each output row sums to one.
    pub fn softmax_last(&self) -> Result<TensorValue> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| shape_err("softmax_last", "rank 0 input".into()))?;
        let mut data = self.data().to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        make_node(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::SoftmaxLast(self.node.clone()),
            "softmax_last",
        )
    }

    pub fn silu(&self) -> Result<TensorValue> {
        let data = self
            .data()
            .iter()
            .map(|&x| x / (1.0 + (-x).exp()))
            .collect();
        make_node(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::Silu(self.node.clone()),
            "silu",
        )
    }

    /// GELU with the tanh approximation.
    pub fn gelu_tanh(&self) -> Result<TensorValue> {
        let data = self.data().iter().map(|&x| gelu_tanh_fwd(x)).collect();
        make_node(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::GeluTanh(self.node.clone()),
            "gelu_tanh",
        )
    }

    pub fn sqrt(&self) -> Result<TensorValue> {
        let data = self.data().iter().map(|&x| x.sqrt()).collect();
        make_node(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::Sqrt(self.node.clone()),
            "sqrt",
        )
    }

    pub fn square(&self) -> Result<TensorValue> {
        let data = self.data().iter().map(|&x| x * x).collect();
        make_node(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::Square(self.node.clone()),
            "square",
        )
    }

    pub fn abs(&self) -> Result<TensorValue> {
        let data = self.data().iter().map(|&x| x.abs()).collect();
        make_node(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::Abs(self.node.clone()),
            "abs",
        )
    }

    /// max(x, c) elementwise; gradient is zero where the clamp is active.
    pub fn clamp_min(&self, c: f64) -> Result<TensorValue> {
        let data = self.data().iter().map(|&x| x.max(c)).collect();
        make_node(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::ClampMin(self.node.clone(), c),
            "clamp_min",
        )
    }

    /// Maximum over all elements, as a scalar; gradient routes to the first
    /// argmax.
    pub fn max_all(&self) -> Result<TensorValue> {
        if self.numel() == 0 {
            return Err(shape_err("max_all", "empty tensor".into()));
        }
        let m = self.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        make_node(
            vec![],
            vec![m],
            self.requires_grad(),
            Op::MaxAll(self.node.clone()),
            "max_all",
        )
    }

    /// Per-last-axis standardization with population variance, then affine:
    /// `gain ⊙ (x − μ)/√(σ² + eps) + bias`.
    pub fn layer_norm(&self, gain: &TensorValue, bias: &TensorValue, eps: f64) -> Result<TensorValue> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| shape_err("layer_norm", "rank 0 input".into()))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} do not match last axis {d}",
                    gain.shape(),
                    bias.shape()
                ),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument("layer_norm eps must be > 0".into()));
        }
        let (g, b) = (gain.data(), bias.data());
        let mut data = Vec::with_capacity(self.numel());
        for row in self.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, &x) in row.iter().enumerate() {
                data.push(g[j] * (x - mean) * inv + b[j]);
            }
        }
        make_node(
            self.shape().to_vec(),
            data,
            self.requires_grad() || gain.requires_grad() || bias.requires_grad(),
            Op::LayerNorm {
                x: self.node.clone(),
                gain: gain.node.clone(),
                bias: bias.node.clone(),
                eps,
            },
            "layer_norm",
        )
    }

    /// Each last-axis vector divided by `max(‖·‖₂, eps)`; zero vectors map to
    /// zero.
    pub fn l2_normalize(&self, eps: f64) -> Result<TensorValue> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| shape_err("l2_normalize", "rank 0 input".into()))?;
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument("l2_normalize eps must be > 0".into()));
        }
        let mut data = Vec::with_capacity(self.numel());
        for row in self.data().chunks(d) {
            let norm = row.iter().map(|&x| x * x).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            data.extend(row.iter().map(|&x| x / denom));
        }
        make_node(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::L2NormalizeLast {
                x: self.node.clone(),
                eps,
            },
            "l2_normalize",
        )
    }

    /// Repeats per-sample vectors across a token axis: `[n,d] -> [n,t,d]`.
    pub fn expand_tokens(&self, tokens: usize) -> Result<TensorValue> {
        if self.shape().len() != 2 || tokens == 0 {
            return Err(shape_err(
                "expand_tokens",
                format!("need [n,d] input and tokens ≥ 1, got {:?}", self.shape()),
            ));
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let mut data = Vec::with_capacity(n * tokens * d);
        for row in self.data().chunks(d) {
            for _ in 0..tokens {
                data.extend_from_slice(row);
            }
        }
        make_node(
            vec![n, tokens, d],
            data,
            self.requires_grad(),
            Op::ExpandTokens {
                x: self.node.clone(),
            },
            "expand_tokens",
        )
    }

    /// Cosine similarity over the last axis with an eps-guarded denominator:
    /// `⟨a,b⟩ / (max(‖a‖,eps) · max(‖b‖,eps))`. Composite of primitive ops,
    /// so it is differentiable end to end.
    pub fn cosine_similarity(&self, other: &TensorValue, eps: f64) -> Result<TensorValue> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "cosine_similarity",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let last = self.shape().len() - 1;
        let dot = self.mul(other)?.sum_axes(&[last])?;
        let na = self.square()?.sum_axes(&[last])?.sqrt()?.clamp_min(eps)?;
        let nb = other.square()?.sum_axes(&[last])?.sqrt()?.clamp_min(eps)?;
        dot.div(&na.mul(&nb)?)
    }
}

fn gelu_tanh_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Copies `data` with axes `ax0` and `ax1` swapped. Division-free: walks the
/// output row-major with an odometer, updating the input flat index through
/// permuted strides.
pub(crate) fn permute_swap(data: &[f64], shape: &[usize], ax0: usize, ax1: usize) -> Vec<f64> {
    if ax0 == ax1 {
        return data.to_vec();
    }
    let nd = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut strides = in_strides;
    strides.swap(ax0, ax1);

    let mut out = Vec::with_capacity(data.len());
    let mut coords = vec![0usize; nd];
    let mut idx = 0usize;
    for _ in 0..data.len() {
        out.push(data[idx]);
        for axis in (0..nd).rev() {
            coords[axis] += 1;
            idx += strides[axis];
            if coords[axis] < out_shape[axis] {
                break;
            }
            idx -= strides[axis] * out_shape[axis];
            coords[axis] = 0;
        }
    }
    out
}

/// Walks every input element of a reduction that removes `axes`, yielding
/// `(input_flat, output_flat)` pairs via an odometer (no divisions).
pub(crate) struct ReduceMap {
    shape: Vec<usize>,
    out_strides: Vec<usize>, // zero for reduced axes
}

impl ReduceMap {
    pub(crate) fn new(shape: &[usize], axes: &[usize]) -> Self {
        let nd = shape.len();
        let mut out_strides = vec![0usize; nd];
        let mut stride = 1usize;
        for i in (0..nd).rev() {
            if !axes.contains(&i) {
                out_strides[i] = stride;
                stride *= shape[i];
            }
        }
        ReduceMap {
            shape: shape.to_vec(),
            out_strides,
        }
    }

    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let nd = self.shape.len();
        let total: usize = self.shape.iter().product();
        let mut coords = vec![0usize; nd];
        let mut out_idx = 0usize;
        for in_idx in 0..total {
            f(in_idx, out_idx);
            for axis in (0..nd).rev() {
                coords[axis] += 1;
                out_idx += self.out_strides[axis];
                if coords[axis] < self.shape[axis] {
                    break;
                }
                out_idx -= self.out_strides[axis] * self.shape[axis];
                coords[axis] = 0;
            }
        }
    }
}
