//! Dense f64 kernels with hand-written backward passes.
//!
//! Forward kernels take an [`OpCounter`] and record exactly the arithmetic
//! they perform. Multiplies and adds (subtractions included) are tallied
//! separately from exponentials and divisions; GELU evaluations, square roots
//! and comparisons go to `other`.

use std::fmt;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("target class {target} out of range for {classes} classes")]
    BadTarget { target: usize, classes: usize },
    #[error("backward called without the matching forward cache")]
    MissingCache,
}

pub type Result<T> = std::result::Result<T, KernelError>;

/// Dense row-major matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor2D({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(KernelError::ShapeMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor2D) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Copies a block of columns `[start, start + width)`.
    pub fn columns(&self, start: usize, width: usize) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_columns(&mut self, start: usize, block: &Tensor2D) {
        for r in 0..self.rows {
            let cols = block.cols;
            self.row_mut(r)[start..start + cols].copy_from_slice(block.row(r));
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor2D) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_same(&self, other: &Tensor2D, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(KernelError::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

/// Tally of arithmetic performed by the forward kernels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    pub muls: u64,
    pub adds: u64,
    pub exps: u64,
    pub divs: u64,
    /// GELU evaluations, square roots and comparisons.
    pub other: u64,
}

impl OpCounter {
    /// Multiplies, adds, exponentials and divisions; `other` is excluded.
    pub fn flops(&self) -> u64 {
        self.muls + self.adds + self.exps + self.divs
    }

    pub fn total(&self) -> u64 {
        self.flops() + self.other
    }
}

impl AddAssign for OpCounter {
    fn add_assign(&mut self, o: Self) {
        self.muls += o.muls;
        self.adds += o.adds;
        self.exps += o.exps;
        self.divs += o.divs;
        self.other += o.other;
    }
}

fn count_matmul(counter: &mut OpCounter, m: usize, k: usize, p: usize) {
    let mp = (m * p) as u64;
    counter.muls += mp * k as u64;
    counter.adds += mp * k.saturating_sub(1) as u64;
}

/// `A·B`, summing over the inner index in ascending order.
pub fn matmul(a: &Tensor2D, b: &Tensor2D, counter: &mut OpCounter) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(KernelError::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, p) = (a.rows, a.cols, b.cols);
    let mut out = Tensor2D::zeros(m, p);
    matmul_kernel(&a.data, &b.data, &mut out.data, m, k, p);
    count_matmul(counter, m, k, p);
    Ok(out)
}

fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    if p == 0 || k == 0 {
        return;
    }
    // Four output rows share each streamed row of `b`.
    let mut i = 0;
    while i + 4 <= m {
        let (o0, rest) = out[i * p..(i + 4) * p].split_at_mut(p);
        let (o1, rest) = rest.split_at_mut(p);
        let (o2, o3) = rest.split_at_mut(p);
        for kk in 0..k {
            let a0 = a[i * k + kk];
            let a1 = a[(i + 1) * k + kk];
            let a2 = a[(i + 2) * k + kk];
            let a3 = a[(i + 3) * k + kk];
            let brow = &b[kk * p..(kk + 1) * p];
            for j in 0..p {
                let bv = brow[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let orow = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
        i += 1;
    }
}

/// `A·Bᵀ`, counted as the equivalent dense product.
pub fn matmul_nt(a: &Tensor2D, b: &Tensor2D, counter: &mut OpCounter) -> Result<Tensor2D> {
    if a.cols != b.cols {
        return Err(KernelError::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    matmul(a, &b.transpose(), counter)
}

/// Gradients of `C = A·B`: returns `(dA, dB) = (dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_bwd(a: &Tensor2D, b: &Tensor2D, d_out: &Tensor2D) -> Result<(Tensor2D, Tensor2D)> {
    if a.cols != b.rows || d_out.shape() != (a.rows, b.cols) {
        return Err(KernelError::ShapeMismatch {
            op: "matmul_bwd",
            left: a.shape(),
            right: d_out.shape(),
        });
    }
    let mut scratch = OpCounter::default();
    let da = matmul(d_out, &b.transpose(), &mut scratch)?;
    let db = matmul(&a.transpose(), d_out, &mut scratch)?;
    Ok((da, db))
}

/// Adds a bias row to every row of `x`.
pub fn add_bias(x: &mut Tensor2D, bias: &Tensor2D, counter: &mut OpCounter) -> Result<()> {
    if bias.rows != 1 || bias.cols != x.cols {
        return Err(KernelError::ShapeMismatch {
            op: "add_bias",
            left: x.shape(),
            right: bias.shape(),
        });
    }
    for r in 0..x.rows {
        for (v, b) in x.row_mut(r).iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    counter.adds += x.data.len() as u64;
    Ok(())
}

/// Column sums, i.e. the gradient of a broadcast bias.
pub fn bias_bwd(d_out: &Tensor2D) -> Tensor2D {
    let mut g = Tensor2D::zeros(1, d_out.cols);
    for r in 0..d_out.rows {
        for (acc, v) in g.data.iter_mut().zip(d_out.row(r)) {
            *acc += v;
        }
    }
    g
}

/// Elementwise sum, counted.
pub fn add(a: &Tensor2D, b: &Tensor2D, counter: &mut OpCounter) -> Result<Tensor2D> {
    a.check_same(b, "add")?;
    let mut out = a.clone();
    for (o, v) in out.data.iter_mut().zip(&b.data) {
        *o += v;
    }
    counter.adds += a.data.len() as u64;
    Ok(out)
}

/// Per-row statistics kept for [`layer_norm_bwd`].
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Tensor2D,
    inv_std: Vec<f64>,
}

/// Row-wise layer normalization with population variance.
pub fn layer_norm(
    x: &Tensor2D,
    gain: &Tensor2D,
    bias: &Tensor2D,
    eps: f64,
    counter: &mut OpCounter,
) -> Result<(Tensor2D, LayerNormCache)> {
    let d = x.cols;
    if gain.shape() != (1, d) || bias.shape() != (1, d) || d == 0 {
        return Err(KernelError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape(),
            right: gain.shape(),
        });
    }
    let mut out = Tensor2D::zeros(x.rows, d);
    let mut normalized = Tensor2D::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        let nrow = normalized.row_mut(r);
        for (n, v) in nrow.iter_mut().zip(row) {
            *n = (v - mean) * istd;
        }
        let orow = &mut out.data[r * d..(r + 1) * d];
        let nrow = &normalized.data[r * d..(r + 1) * d];
        for (((o, n), g), b) in orow.iter_mut().zip(nrow).zip(&gain.data).zip(&bias.data) {
            *o = n * g + b;
        }
    }
    let (rows, dd) = (x.rows as u64, d as u64);
    // mean: d−1 adds, 1 div; variance: d subs, d muls, d−1 adds, 1 div;
    // eps add, sqrt, reciprocal; normalize: d subs, d muls; affine: d muls, d adds.
    counter.adds += rows * ((dd - 1) + dd + (dd - 1) + 1 + dd + dd);
    counter.muls += rows * (dd + dd + dd);
    counter.divs += rows * 3;
    counter.other += rows;
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Returns `(dx, d_gain, d_bias)`.
pub fn layer_norm_bwd(
    cache: &LayerNormCache,
    gain: &Tensor2D,
    d_out: &Tensor2D,
) -> Result<(Tensor2D, Tensor2D, Tensor2D)> {
    let (rows, d) = cache.normalized.shape();
    if d_out.shape() != (rows, d) || gain.shape() != (1, d) {
        return Err(KernelError::ShapeMismatch {
            op: "layer_norm_bwd",
            left: cache.normalized.shape(),
            right: d_out.shape(),
        });
    }
    let mut dx = Tensor2D::zeros(rows, d);
    let mut d_gain = Tensor2D::zeros(1, d);
    let mut d_bias = Tensor2D::zeros(1, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let xhat = cache.normalized.row(r);
        let dy = d_out.row(r);
        for j in 0..d {
            d_gain.data[j] += dy[j] * xhat[j];
            d_bias.data[j] += dy[j];
            dxhat[j] = dy[j] * gain.data[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let istd = cache.inv_std[r];
        for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = istd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    Ok((dx, d_gain, d_bias))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// `d/dx [x·Φ(x)] = Φ(x) + x·φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

pub fn gelu_tensor(x: &Tensor2D, counter: &mut OpCounter) -> Tensor2D {
    counter.other += x.data.len() as u64;
    Tensor2D {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| gelu(v)).collect(),
    }
}

/// Gradient through GELU given the pre-activation input.
pub fn gelu_bwd(pre: &Tensor2D, d_out: &Tensor2D) -> Result<Tensor2D> {
    pre.check_same(d_out, "gelu_bwd")?;
    Ok(Tensor2D {
        rows: pre.rows,
        cols: pre.cols,
        data: pre
            .data
            .iter()
            .zip(&d_out.data)
            .map(|(&x, &g)| g * gelu_grad(x))
            .collect(),
    })
}

/// Row softmax with max subtraction.
pub fn softmax_rows(x: &Tensor2D, counter: &mut OpCounter) -> Tensor2D {
    let mut out = x.clone();
    let w = x.cols;
    if w == 0 {
        return out;
    }
    for r in 0..x.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    let (rows, ww) = (x.rows as u64, w as u64);
    counter.adds += rows * (ww + ww - 1);
    counter.exps += rows * ww;
    counter.divs += rows * ww;
    counter.other += rows * (ww - 1);
    out
}

/// Gradient through a row softmax given its output.
pub fn softmax_rows_bwd(probs: &Tensor2D, d_out: &Tensor2D) -> Result<Tensor2D> {
    probs.check_same(d_out, "softmax_rows_bwd")?;
    let mut dx = Tensor2D::zeros(probs.rows, probs.cols);
    for r in 0..probs.rows {
        let p = probs.row(r);
        let g = d_out.row(r);
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = p[j] * (g[j] - dot);
        }
    }
    Ok(dx)
}

/// Cached activations of one scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Tensor2D,
    k: Tensor2D,
    v: Tensor2D,
    probs: Tensor2D,
    scale: f64,
}

impl AttentionCache {
    pub fn probs(&self) -> &Tensor2D {
        &self.probs
    }
}

/// `softmax(q·kᵀ/√d)·v` for `q, k, v` of shape `tokens × d`.
pub fn scaled_dot_attention(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    counter: &mut OpCounter,
) -> Result<(Tensor2D, AttentionCache)> {
    if q.shape() != k.shape() || k.rows != v.rows {
        return Err(KernelError::ShapeMismatch {
            op: "scaled_dot_attention",
            left: q.shape(),
            right: k.shape(),
        });
    }
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut scores = matmul_nt(q, k, counter)?;
    scores.scale(scale);
    counter.muls += scores.data.len() as u64;
    let probs = softmax_rows(&scores, counter);
    let out = matmul(&probs, v, counter)?;
    Ok((
        out,
        AttentionCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            probs,
            scale,
        },
    ))
}

/// Backward of [`scaled_dot_attention`]: returns `(dq, dk, dv)`.
pub fn softmax_attention_bwd(
    cache: &AttentionCache,
    d_out: &Tensor2D,
) -> Result<(Tensor2D, Tensor2D, Tensor2D)> {
    if d_out.shape() != (cache.q.rows, cache.v.cols) {
        return Err(KernelError::ShapeMismatch {
            op: "softmax_attention_bwd",
            left: (cache.q.rows, cache.v.cols),
            right: d_out.shape(),
        });
    }
    let (d_probs, dv) = matmul_bwd(&cache.probs, &cache.v, d_out)?;
    let mut d_scores = softmax_rows_bwd(&cache.probs, &d_probs)?;
    d_scores.scale(cache.scale);
    // scores = q·kᵀ
    let mut scratch = OpCounter::default();
    let dq = matmul(&d_scores, &cache.k, &mut scratch)?;
    let dk = matmul(&d_scores.transpose(), &cache.q, &mut scratch)?;
    Ok((dq, dk, dv))
}

/// Returns `(loss, d_logits)` for `−log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(KernelError::BadTarget {
            target,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|v| (v - log_z).exp()).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}
