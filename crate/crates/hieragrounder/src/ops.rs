//! Differentiable primitive operations.
//!
//! Each op validates shapes, computes the forward value with plain loops,
//! and records an `Op` node carrying whatever the backward pass needs
//! (attention weights, scan states). `apply_vjp` dispatches the hand-written
//! vector-Jacobian products. Sequence ops treat dim 0 as time and dim 1 as
//! channels. Broadcasting is restricted to trailing-dimension (`add_bias`,
//! `mul_rowvec`) and scalar (`affine`) forms.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{accumulate, grad_enabled, Tensor};

// ── Op record ───────────────────────────────────────────────────────────

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Affine { x: Tensor, mul: f64 },
    AddBias { x: Tensor, bias: Tensor },
    MulRowVec { x: Tensor, v: Tensor },
    Sigmoid(Tensor),
    Softplus(Tensor),
    Silu(Tensor),
    RmsNorm { x: Tensor, gain: Tensor, eps: f64 },
    NormalizeRows { x: Tensor, eps: f64 },
    Matmul { a: Tensor, b: Tensor },
    MatmulNT { a: Tensor, b: Tensor },
    Conv1d { x: Tensor, kernel: Tensor, bias: Option<Tensor> },
    DepthwiseConv1d { x: Tensor, kernel: Tensor, bias: Option<Tensor> },
    ReverseRows(Tensor),
    SelectRows { x: Tensor, idx: Vec<usize> },
    ConcatRows { xs: Vec<Tensor> },
    WindowPoolMean { x: Tensor, stride: usize },
    WindowPoolMax { x: Tensor, stride: usize, argmax: Vec<usize> },
    MeanRows(Tensor),
    SumAll(Tensor),
    MeanAll(Tensor),
    MaskedLogsumexp { x: Tensor, masks: Vec<Vec<usize>> },
    CrossAttention { q: Tensor, k: Tensor, v: Tensor, heads: usize, weights: Vec<f64> },
    WindowedAttention {
        q: Tensor,
        k: Tensor,
        v: Tensor,
        relbias: Tensor,
        window: usize,
        heads: usize,
        weights: Vec<f64>,
    },
    SelectiveScanCore {
        xt: Tensor,
        b: Tensor,
        c: Tensor,
        delta: Tensor,
        a: Tensor,
        zoh: bool,
        states: Vec<f64>,
    },
    FixedScan {
        x: Tensor,
        a: Tensor,
        b: Tensor,
        c: Tensor,
        d: Tensor,
        h0: Tensor,
        states: Vec<f64>,
    },
    FocalLoss { p: Tensor, labels: Vec<f64>, alpha: f64, gamma: f64 },
    DiouLoss { pred: Tensor, gt: Vec<f64> },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Affine { x, .. } => vec![x],
            Op::AddBias { x, bias } => vec![x, bias],
            Op::MulRowVec { x, v } => vec![x, v],
            Op::Sigmoid(x) | Op::Softplus(x) | Op::Silu(x) => vec![x],
            Op::RmsNorm { x, gain, .. } => vec![x, gain],
            Op::NormalizeRows { x, .. } => vec![x],
            Op::Matmul { a, b } | Op::MatmulNT { a, b } => vec![a, b],
            Op::Conv1d { x, kernel, bias } | Op::DepthwiseConv1d { x, kernel, bias } => {
                let mut v = vec![x, kernel];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            Op::ReverseRows(x) => vec![x],
            Op::SelectRows { x, .. } => vec![x],
            Op::ConcatRows { xs } => xs.iter().collect(),
            Op::WindowPoolMean { x, .. } | Op::WindowPoolMax { x, .. } => vec![x],
            Op::MeanRows(x) | Op::SumAll(x) | Op::MeanAll(x) => vec![x],
            Op::MaskedLogsumexp { x, .. } => vec![x],
            Op::CrossAttention { q, k, v, .. } => vec![q, k, v],
            Op::WindowedAttention { q, k, v, relbias, .. } => vec![q, k, v, relbias],
            Op::SelectiveScanCore { xt, b, c, delta, a, .. } => vec![xt, b, c, delta, a],
            Op::FixedScan { x, a, b, c, d, h0, .. } => vec![x, a, b, c, d, h0],
            Op::FocalLoss { p, .. } => vec![p],
            Op::DiouLoss { pred, .. } => vec![pred],
        }
    }
}

// ── shape helpers ───────────────────────────────────────────────────────

fn require_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn require_2d(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape(format!("{op}: expected 2-D tensor, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn require_1d(op: &str, t: &Tensor) -> Result<usize> {
    if t.shape().len() != 1 {
        return Err(Error::Shape(format!("{op}: expected 1-D tensor, got {:?}", t.shape())));
    }
    Ok(t.shape()[0])
}

fn tracked(inputs: &[&Tensor]) -> bool {
    grad_enabled() && inputs.iter().any(|t| t.needs_grad())
}

// ── raw matmul kernels ──────────────────────────────────────────────────

/// a[m,k] @ b[k,n] -> [m,n]
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// x[rx,inner] @ y[ry,inner]^T -> [rx,ry]
pub(crate) fn mm_nt(x: &[f64], y: &[f64], rx: usize, inner: usize, ry: usize) -> Vec<f64> {
    let mut out = vec![0.0; rx * ry];
    for i in 0..rx {
        let xrow = &x[i * inner..(i + 1) * inner];
        for j in 0..ry {
            let yrow = &y[j * inner..(j + 1) * inner];
            let mut s = 0.0;
            for l in 0..inner {
                s += xrow[l] * yrow[l];
            }
            out[i * ry + j] = s;
        }
    }
    out
}

/// x[rows,cx]^T @ y[rows,cy] -> [cx,cy]
pub(crate) fn mm_tn(x: &[f64], y: &[f64], rows: usize, cx: usize, cy: usize) -> Vec<f64> {
    let mut out = vec![0.0; cx * cy];
    for r in 0..rows {
        let xrow = &x[r * cx..(r + 1) * cx];
        let yrow = &y[r * cy..(r + 1) * cy];
        for i in 0..cx {
            let xv = xrow[i];
            if xv == 0.0 {
                continue;
            }
            let orow = &mut out[i * cy..(i + 1) * cy];
            for j in 0..cy {
                orow[j] += xv * yrow[j];
            }
        }
    }
    out
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// ── elementwise ─────────────────────────────────────────────────────────

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_same_shape("add", a, b)?;
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    Ok(Tensor::node(data, a.shape().to_vec(), Op::Add(a.clone(), b.clone())))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_same_shape("sub", a, b)?;
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
    Ok(Tensor::node(data, a.shape().to_vec(), Op::Sub(a.clone(), b.clone())))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_same_shape("mul", a, b)?;
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    Ok(Tensor::node(data, a.shape().to_vec(), Op::Mul(a.clone(), b.clone())))
}

/// out = mul * x + add, elementwise with scalar coefficients.
pub fn affine(x: &Tensor, mul: f64, add: f64) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|v| mul * v + add).collect();
    Ok(Tensor::node(data, x.shape().to_vec(), Op::Affine { x: x.clone(), mul }))
}

pub fn scale(x: &Tensor, s: f64) -> Result<Tensor> {
    affine(x, s, 0.0)
}

/// x[r,c] + bias[c], broadcast over rows.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (r, c) = require_2d("add_bias", x)?;
    let bc = require_1d("add_bias", bias)?;
    if bc != c {
        return Err(Error::Shape(format!(
            "add_bias: bias length {bc} does not match columns {c}"
        )));
    }
    let xd = x.data();
    let bd = bias.data();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(xd[i * c + j] + bd[j]);
        }
    }
    drop(xd);
    drop(bd);
    Ok(Tensor::node(data, vec![r, c], Op::AddBias { x: x.clone(), bias: bias.clone() }))
}

/// x[r,c] * v[c], broadcast over rows.
pub fn mul_rowvec(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (r, c) = require_2d("mul_rowvec", x)?;
    let vc = require_1d("mul_rowvec", v)?;
    if vc != c {
        return Err(Error::Shape(format!(
            "mul_rowvec: vector length {vc} does not match columns {c}"
        )));
    }
    let xd = x.data();
    let vd = v.data();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(xd[i * c + j] * vd[j]);
        }
    }
    drop(xd);
    drop(vd);
    Ok(Tensor::node(data, vec![r, c], Op::MulRowVec { x: x.clone(), v: v.clone() }))
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    Ok(Tensor::node(data, x.shape().to_vec(), Op::Sigmoid(x.clone())))
}

pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|&v| softplus_scalar(v)).collect();
    Ok(Tensor::node(data, x.shape().to_vec(), Op::Softplus(x.clone())))
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|&v| v * sigmoid_scalar(v)).collect();
    Ok(Tensor::node(data, x.shape().to_vec(), Op::Silu(x.clone())))
}

// ── normalization ───────────────────────────────────────────────────────

/// Row-wise RMS normalization with learned gain:
/// out[t,d] = x[t,d] / sqrt(mean_d(x[t,:]^2) + eps) * gain[d].
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let (t, d) = require_2d("rms_norm", x)?;
    let gd = require_1d("rms_norm", gain)?;
    if gd != d {
        return Err(Error::Shape(format!(
            "rms_norm: gain shape {:?} does not match feature dim of x shape {:?}",
            gain.shape(),
            x.shape()
        )));
    }
    let xd = x.data();
    let g = gain.data();
    let mut data = Vec::with_capacity(t * d);
    for i in 0..t {
        let row = &xd[i * d..(i + 1) * d];
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = (ms + eps).sqrt();
        for j in 0..d {
            data.push(row[j] / r * g[j]);
        }
    }
    drop(xd);
    drop(g);
    Ok(Tensor::node(data, vec![t, d], Op::RmsNorm { x: x.clone(), gain: gain.clone(), eps }))
}

/// Rows scaled to unit L2 norm: out[t,:] = x[t,:] / (||x[t,:]|| + eps).
/// Unit-normalizes each row, dividing by max(norm, eps). The max keeps the
/// map exactly scale-invariant away from zero (y(c*x) == y(x) bit-for-bit up
/// to rounding), which the cosine-similarity losses rely on.
pub fn normalize_rows(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (t, d) = require_2d("normalize_rows", x)?;
    let xd = x.data();
    let mut data = Vec::with_capacity(t * d);
    for i in 0..t {
        let row = &xd[i * d..(i + 1) * d];
        let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = n.max(eps);
        for j in 0..d {
            data.push(row[j] / s);
        }
    }
    drop(xd);
    Ok(Tensor::node(data, vec![t, d], Op::NormalizeRows { x: x.clone(), eps }))
}

// ── linear algebra ──────────────────────────────────────────────────────

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul: inner dims disagree, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = mm(&a.data(), &b.data(), m, k, n);
    Ok(Tensor::node(data, vec![m, n], Op::Matmul { a: a.clone(), b: b.clone() }))
}

/// a[m,k] @ b[n,k]^T -> [m,n]
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul_nt", a)?;
    let (n, k2) = require_2d("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul_nt: inner dims disagree, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = mm_nt(&a.data(), &b.data(), m, k, n);
    Ok(Tensor::node(data, vec![m, n], Op::MatmulNT { a: a.clone(), b: b.clone() }))
}

// ── convolution ─────────────────────────────────────────────────────────

/// Same-padded 1-D convolution over time. x[T,Din], kernel[K,Din,Dout]
/// with K odd, zero padding at both ends.
pub fn conv1d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (t, din) = require_2d("conv1d", x)?;
    if kernel.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "conv1d: kernel must be [K,Din,Dout], got {:?}",
            kernel.shape()
        )));
    }
    let (k, kin, dout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if k % 2 == 0 {
        return Err(Error::Shape(format!("conv1d: kernel width {k} must be odd")));
    }
    if kin != din {
        return Err(Error::Shape(format!(
            "conv1d: kernel input dim {kin} does not match x feature dim {din}"
        )));
    }
    if let Some(b) = bias {
        let bl = require_1d("conv1d", b)?;
        if bl != dout {
            return Err(Error::Shape(format!(
                "conv1d: bias length {bl} does not match output dim {dout}"
            )));
        }
    }
    let r = k / 2;
    let xd = x.data();
    let kd = kernel.data();
    let mut data = vec![0.0; t * dout];
    if let Some(b) = bias {
        let bd = b.data();
        for i in 0..t {
            data[i * dout..(i + 1) * dout].copy_from_slice(&bd);
        }
    }
    for i in 0..t {
        for kk in 0..k {
            let src = i as isize + kk as isize - r as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let xrow = &xd[src as usize * din..(src as usize + 1) * din];
            for ci in 0..din {
                let xv = xrow[ci];
                if xv == 0.0 {
                    continue;
                }
                let krow = &kd[(kk * din + ci) * dout..(kk * din + ci + 1) * dout];
                let orow = &mut data[i * dout..(i + 1) * dout];
                for co in 0..dout {
                    orow[co] += xv * krow[co];
                }
            }
        }
    }
    drop(xd);
    drop(kd);
    Ok(Tensor::node(
        data,
        vec![t, dout],
        Op::Conv1d { x: x.clone(), kernel: kernel.clone(), bias: bias.cloned() },
    ))
}

/// Per-channel same-padded convolution. x[T,D], kernel[K,D], K odd.
pub fn depthwise_conv1d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (t, d) = require_2d("depthwise_conv1d", x)?;
    let (k, kd_dim) = require_2d("depthwise_conv1d", kernel)?;
    if k % 2 == 0 {
        return Err(Error::Shape(format!("depthwise_conv1d: kernel width {k} must be odd")));
    }
    if kd_dim != d {
        return Err(Error::Shape(format!(
            "depthwise_conv1d: kernel channel dim {kd_dim} does not match x feature dim {d}"
        )));
    }
    if let Some(b) = bias {
        let bl = require_1d("depthwise_conv1d", b)?;
        if bl != d {
            return Err(Error::Shape(format!(
                "depthwise_conv1d: bias length {bl} does not match channels {d}"
            )));
        }
    }
    let r = k / 2;
    let xd = x.data();
    let kd = kernel.data();
    let mut data = vec![0.0; t * d];
    if let Some(b) = bias {
        let bd = b.data();
        for i in 0..t {
            data[i * d..(i + 1) * d].copy_from_slice(&bd);
        }
    }
    for i in 0..t {
        for kk in 0..k {
            let src = i as isize + kk as isize - r as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let xrow = &xd[src as usize * d..(src as usize + 1) * d];
            let krow = &kd[kk * d..(kk + 1) * d];
            let orow = &mut data[i * d..(i + 1) * d];
            for ci in 0..d {
                orow[ci] += xrow[ci] * krow[ci];
            }
        }
    }
    drop(xd);
    drop(kd);
    Ok(Tensor::node(
        data,
        vec![t, d],
        Op::DepthwiseConv1d { x: x.clone(), kernel: kernel.clone(), bias: bias.cloned() },
    ))
}

// ── indexing / reshaping ────────────────────────────────────────────────

pub fn reverse_rows(x: &Tensor) -> Result<Tensor> {
    let (t, d) = require_2d("reverse_rows", x)?;
    let xd = x.data();
    let mut data = Vec::with_capacity(t * d);
    for i in (0..t).rev() {
        data.extend_from_slice(&xd[i * d..(i + 1) * d]);
    }
    drop(xd);
    Ok(Tensor::node(data, vec![t, d], Op::ReverseRows(x.clone())))
}

/// Gather of full rows; backward scatter-adds.
pub fn select_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (t, d) = require_2d("select_rows", x)?;
    for &i in idx {
        if i >= t {
            return Err(Error::Shape(format!(
                "select_rows: index {i} out of range for {t} rows"
            )));
        }
    }
    let xd = x.data();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&xd[i * d..(i + 1) * d]);
    }
    drop(xd);
    Ok(Tensor::node(data, vec![idx.len(), d], Op::SelectRows { x: x.clone(), idx: idx.to_vec() }))
}

pub fn concat_rows(xs: &[Tensor]) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(Error::Shape("concat_rows: empty input list".into()));
    }
    let (_, d) = require_2d("concat_rows", &xs[0])?;
    let mut rows = 0;
    for x in xs {
        let (r, c) = require_2d("concat_rows", x)?;
        if c != d {
            return Err(Error::Shape(format!(
                "concat_rows: column mismatch {c} vs {d}"
            )));
        }
        rows += r;
    }
    let mut data = Vec::with_capacity(rows * d);
    for x in xs {
        data.extend_from_slice(&x.data());
    }
    Ok(Tensor::node(data, vec![rows, d], Op::ConcatRows { xs: xs.to_vec() }))
}

// ── pooling / reductions ────────────────────────────────────────────────

/// Non-overlapping window mean over rows; the last window may be short.
/// Output has ceil(L/stride) rows.
pub fn window_pool_mean(x: &Tensor, stride: usize) -> Result<Tensor> {
    let (l, d) = require_2d("window_pool_mean", x)?;
    if stride == 0 {
        return Err(Error::Config("window_pool_mean: stride must be >= 1".into()));
    }
    if l == 0 {
        return Err(Error::Shape("window_pool_mean: empty input".into()));
    }
    let m = l.div_ceil(stride);
    let xd = x.data();
    let mut data = vec![0.0; m * d];
    for w in 0..m {
        let lo = w * stride;
        let hi = ((w + 1) * stride).min(l);
        let cnt = (hi - lo) as f64;
        for i in lo..hi {
            for j in 0..d {
                data[w * d + j] += xd[i * d + j];
            }
        }
        for j in 0..d {
            data[w * d + j] /= cnt;
        }
    }
    drop(xd);
    Ok(Tensor::node(data, vec![m, d], Op::WindowPoolMean { x: x.clone(), stride }))
}

/// Non-overlapping window max over rows, per channel.
pub fn window_pool_max(x: &Tensor, stride: usize) -> Result<Tensor> {
    let (l, d) = require_2d("window_pool_max", x)?;
    if stride == 0 {
        return Err(Error::Config("window_pool_max: stride must be >= 1".into()));
    }
    if l == 0 {
        return Err(Error::Shape("window_pool_max: empty input".into()));
    }
    let m = l.div_ceil(stride);
    let xd = x.data();
    let mut data = vec![f64::NEG_INFINITY; m * d];
    let mut argmax = vec![0usize; m * d];
    for w in 0..m {
        let lo = w * stride;
        let hi = ((w + 1) * stride).min(l);
        for i in lo..hi {
            for j in 0..d {
                let v = xd[i * d + j];
                if v > data[w * d + j] {
                    data[w * d + j] = v;
                    argmax[w * d + j] = i;
                }
            }
        }
    }
    drop(xd);
    Ok(Tensor::node(data, vec![m, d], Op::WindowPoolMax { x: x.clone(), stride, argmax }))
}

/// Column means: [R,C] -> [1,C].
pub fn mean_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = require_2d("mean_rows", x)?;
    if r == 0 {
        return Err(Error::Shape("mean_rows: empty input".into()));
    }
    let xd = x.data();
    let mut data = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            data[j] += xd[i * c + j];
        }
    }
    for v in data.iter_mut() {
        *v /= r as f64;
    }
    drop(xd);
    Ok(Tensor::node(data, vec![1, c], Op::MeanRows(x.clone())))
}

pub fn sum_all(x: &Tensor) -> Result<Tensor> {
    let s: f64 = x.data().iter().sum();
    Ok(Tensor::node(vec![s], vec![1], Op::SumAll(x.clone())))
}

pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    if x.numel() == 0 {
        return Err(Error::Shape("mean_all: empty input".into()));
    }
    let s: f64 = x.data().iter().sum::<f64>() / x.numel() as f64;
    Ok(Tensor::node(vec![s], vec![1], Op::MeanAll(x.clone())))
}

/// Per-row log-sum-exp over a non-empty index subset of columns.
/// out[r] = log sum_{j in masks[r]} exp(x[r,j]). Max-subtracted.
pub fn masked_logsumexp(x: &Tensor, masks: &[Vec<usize>]) -> Result<Tensor> {
    let (r, c) = require_2d("masked_logsumexp", x)?;
    if masks.len() != r {
        return Err(Error::Shape(format!(
            "masked_logsumexp: {} masks for {} rows",
            masks.len(),
            r
        )));
    }
    for (i, m) in masks.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::Config(format!("masked_logsumexp: empty mask at row {i}")));
        }
        for &j in m {
            if j >= c {
                return Err(Error::Shape(format!(
                    "masked_logsumexp: column {j} out of range for {c} columns"
                )));
            }
        }
    }
    let xd = x.data();
    let mut data = Vec::with_capacity(r);
    for (i, m) in masks.iter().enumerate() {
        let row = &xd[i * c..(i + 1) * c];
        let mx = m.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = m.iter().map(|&j| (row[j] - mx).exp()).sum();
        data.push(mx + s.ln());
    }
    drop(xd);
    Ok(Tensor::node(data, vec![r], Op::MaskedLogsumexp { x: x.clone(), masks: masks.to_vec() }))
}

// ── attention ───────────────────────────────────────────────────────────

fn attention_forward(
    qd: &[f64],
    kd: &[f64],
    vd: &[f64],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scl = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; tq * d];
    let mut weights = vec![0.0; heads * tq * tk];
    let mut scores = vec![0.0; tk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..tq {
            let qrow = &qd[i * d + off..i * d + off + dh];
            let mut mx = f64::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate() {
                let krow = &kd[j * d + off..j * d + off + dh];
                let mut acc = 0.0;
                for l in 0..dh {
                    acc += qrow[l] * krow[l];
                }
                *s = acc * scl;
                mx = mx.max(*s);
            }
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - mx).exp();
                z += *s;
            }
            let wbase = (h * tq + i) * tk;
            for j in 0..tk {
                let w = scores[j] / z;
                weights[wbase + j] = w;
                let vrow = &vd[j * d + off..j * d + off + dh];
                let orow = &mut out[i * d + off..i * d + off + dh];
                for l in 0..dh {
                    orow[l] += w * vrow[l];
                }
            }
        }
    }
    (out, weights)
}

/// Full multi-head attention: queries q[Tq,D] over keys/values k,v[Tk,D].
/// Self-attention is the q == k == v case.
pub fn cross_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (tq, d) = require_2d("cross_attention", q)?;
    let (tk, dk) = require_2d("cross_attention", k)?;
    let (tv, dv) = require_2d("cross_attention", v)?;
    if dk != d || dv != d {
        return Err(Error::Shape(format!(
            "cross_attention: feature dims disagree: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if tv != tk {
        return Err(Error::Shape(format!(
            "cross_attention: key rows {tk} != value rows {tv}"
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "cross_attention: heads {heads} must divide feature dim {d}"
        )));
    }
    if tk == 0 {
        return Err(Error::Shape("cross_attention: empty key set".into()));
    }
    let (out, weights) = attention_forward(&q.data(), &k.data(), &v.data(), tq, tk, d, heads);
    Ok(Tensor::node(
        out,
        vec![tq, d],
        Op::CrossAttention { q: q.clone(), k: k.clone(), v: v.clone(), heads, weights },
    ))
}

/// Windowed multi-head self-attention with a learned relative-position bias
/// per head. Token t attends to tokens within +-(window-1)/2; the bias table
/// relbias[heads, window] is indexed by offset + (window-1)/2.
pub fn windowed_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    relbias: &Tensor,
    window: usize,
    heads: usize,
) -> Result<Tensor> {
    let (t, d) = require_2d("windowed_attention", q)?;
    require_same_shape("windowed_attention", q, k)?;
    require_same_shape("windowed_attention", q, v)?;
    if window % 2 == 0 || window == 0 {
        return Err(Error::Config(format!(
            "windowed_attention: window {window} must be odd"
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "windowed_attention: heads {heads} must divide feature dim {d}"
        )));
    }
    if relbias.shape() != [heads, window] {
        return Err(Error::Shape(format!(
            "windowed_attention: relbias shape {:?}, expected [{heads}, {window}]",
            relbias.shape()
        )));
    }
    let r = (window - 1) / 2;
    let dh = d / heads;
    let scl = 1.0 / (dh as f64).sqrt();
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let bd = relbias.data();
    let mut out = vec![0.0; t * d];
    let mut weights = vec![0.0; heads * t * window];
    let mut scores = vec![0.0; window];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(t);
            let qrow = &qd[i * d + off..i * d + off + dh];
            let mut mx = f64::NEG_INFINITY;
            for j in lo..hi {
                let krow = &kd[j * d + off..j * d + off + dh];
                let mut acc = 0.0;
                for l in 0..dh {
                    acc += qrow[l] * krow[l];
                }
                let s = acc * scl + bd[h * window + (j + r - i)];
                scores[j - lo] = s;
                mx = mx.max(s);
            }
            let mut z = 0.0;
            for s in scores[..hi - lo].iter_mut() {
                *s = (*s - mx).exp();
                z += *s;
            }
            let wbase = (h * t + i) * window;
            for j in lo..hi {
                let w = scores[j - lo] / z;
                weights[wbase + (j + r - i)] = w;
                let vrow = &vd[j * d + off..j * d + off + dh];
                let orow = &mut out[i * d + off..i * d + off + dh];
                for l in 0..dh {
                    orow[l] += w * vrow[l];
                }
            }
        }
    }
    drop(qd);
    drop(kd);
    drop(vd);
    drop(bd);
    Ok(Tensor::node(
        out,
        vec![t, d],
        Op::WindowedAttention {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            relbias: relbias.clone(),
            window,
            heads,
            weights,
        },
    ))
}

// ── scans ───────────────────────────────────────────────────────────────

/// Input-dependent diagonal state-space recurrence over time. Per channel d
/// a state vector of size N evolves as
///   default: h_k = delta_k * (a (.) h_{k-1} + b_k * x[k,d])
///   zoh:     h_k = exp(delta_k * a) (.) h_{k-1} + delta_k * b_k * x[k,d]
/// and y[k,d] = c_k . h_k. Parameters b, c, delta are per-token signals
/// computed upstream; `a` is the shared diagonal transition.
pub fn selective_scan_core(
    xt: &Tensor,
    b: &Tensor,
    c: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    zoh: bool,
) -> Result<Tensor> {
    let (t, dc) = require_2d("selective_scan_core", xt)?;
    let (tb, n) = require_2d("selective_scan_core", b)?;
    let (tc, nc) = require_2d("selective_scan_core", c)?;
    let na = require_1d("selective_scan_core", a)?;
    if tb != t || tc != t || delta.numel() != t {
        return Err(Error::Shape(format!(
            "selective_scan_core: time dims disagree: x {t}, b {tb}, c {tc}, delta {}",
            delta.numel()
        )));
    }
    if nc != n || na != n {
        return Err(Error::Shape(format!(
            "selective_scan_core: state dims disagree: b {n}, c {nc}, a {na}"
        )));
    }
    for (name, tt) in [("x", xt), ("b", b), ("c", c), ("delta", delta)] {
        if tt.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "selective_scan_core: non-finite value in input {name}"
            )));
        }
    }
    let save = tracked(&[xt, b, c, delta, a]);
    let xd = xt.data();
    let bd = b.data();
    let cd = c.data();
    let dd = delta.data();
    let ad = a.data();
    let mut y = vec![0.0; t * dc];
    let mut h = vec![0.0; dc * n];
    let mut states = if save { vec![0.0; t * dc * n] } else { Vec::new() };
    let mut decay = vec![0.0; n];
    for k in 0..t {
        let dt = dd[k];
        let brow = &bd[k * n..(k + 1) * n];
        let crow = &cd[k * n..(k + 1) * n];
        if zoh {
            for nn in 0..n {
                decay[nn] = (dt * ad[nn]).exp();
            }
        }
        for d in 0..dc {
            let xv = xd[k * dc + d];
            let hrow = &mut h[d * n..(d + 1) * n];
            let mut yv = 0.0;
            if zoh {
                for nn in 0..n {
                    hrow[nn] = decay[nn] * hrow[nn] + dt * brow[nn] * xv;
                    yv += crow[nn] * hrow[nn];
                }
            } else {
                for nn in 0..n {
                    hrow[nn] = dt * (ad[nn] * hrow[nn] + brow[nn] * xv);
                    yv += crow[nn] * hrow[nn];
                }
            }
            y[k * dc + d] = yv;
        }
        if save {
            states[k * dc * n..(k + 1) * dc * n].copy_from_slice(&h);
        }
    }
    drop(xd);
    drop(bd);
    drop(cd);
    drop(dd);
    drop(ad);
    Ok(Tensor::node(
        y,
        vec![t, dc],
        Op::SelectiveScanCore {
            xt: xt.clone(),
            b: b.clone(),
            c: c.clone(),
            delta: delta.clone(),
            a: a.clone(),
            zoh,
            states,
        },
    ))
}

/// Time-invariant linear state-space scan with dense matrices:
/// h_k = a h_{k-1} + b x_k,  y_k = c h_k + d x_k,  h_{-1} = h0.
pub fn fixed_scan(
    x: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
    h0: &Tensor,
) -> Result<Tensor> {
    let (t, din) = require_2d("fixed_scan", x)?;
    let (n, n2) = require_2d("fixed_scan", a)?;
    let (nb, dinb) = require_2d("fixed_scan", b)?;
    let (dout, nc) = require_2d("fixed_scan", c)?;
    let (doutd, dind) = require_2d("fixed_scan", d)?;
    let nh = require_1d("fixed_scan", h0)?;
    if n != n2 || nb != n || nc != n || nh != n {
        return Err(Error::Shape(format!(
            "fixed_scan: state dims disagree: a {:?}, b {:?}, c {:?}, h0 {:?}",
            a.shape(),
            b.shape(),
            c.shape(),
            h0.shape()
        )));
    }
    if dinb != din || dind != din || doutd != dout {
        return Err(Error::Shape(format!(
            "fixed_scan: channel dims disagree: x {:?}, b {:?}, c {:?}, d {:?}",
            x.shape(),
            b.shape(),
            c.shape(),
            d.shape()
        )));
    }
    let save = tracked(&[x, a, b, c, d, h0]);
    let xd = x.data();
    let ad = a.data();
    let bd = b.data();
    let cd = c.data();
    let dd = d.data();
    let mut h = h0.to_vec();
    let mut hn = vec![0.0; n];
    let mut y = vec![0.0; t * dout];
    let mut states = if save { vec![0.0; t * n] } else { Vec::new() };
    for k in 0..t {
        let xrow = &xd[k * din..(k + 1) * din];
        for i in 0..n {
            let mut acc = 0.0;
            let arow = &ad[i * n..(i + 1) * n];
            for j in 0..n {
                acc += arow[j] * h[j];
            }
            let brow = &bd[i * din..(i + 1) * din];
            for j in 0..din {
                acc += brow[j] * xrow[j];
            }
            hn[i] = acc;
        }
        if hn.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "fixed_scan: non-finite state at step {k}"
            )));
        }
        h.copy_from_slice(&hn);
        if save {
            states[k * n..(k + 1) * n].copy_from_slice(&h);
        }
        let yrow = &mut y[k * dout..(k + 1) * dout];
        for o in 0..dout {
            let mut acc = 0.0;
            let crow = &cd[o * n..(o + 1) * n];
            for j in 0..n {
                acc += crow[j] * h[j];
            }
            let drow = &dd[o * din..(o + 1) * din];
            for j in 0..din {
                acc += drow[j] * xrow[j];
            }
            yrow[o] = acc;
        }
    }
    drop(xd);
    drop(ad);
    drop(bd);
    drop(cd);
    drop(dd);
    Ok(Tensor::node(
        y,
        vec![t, dout],
        Op::FixedScan {
            x: x.clone(),
            a: a.clone(),
            b: b.clone(),
            c: c.clone(),
            d: d.clone(),
            h0: h0.clone(),
            states,
        },
    ))
}

// ── losses (fused) ──────────────────────────────────────────────────────

/// Binary focal loss, mean over entries. `p` are probabilities in (0,1),
/// `labels` are 0/1 constants of the same length.
pub fn focal_loss(p: &Tensor, labels: &[f64], alpha: f64, gamma: f64) -> Result<Tensor> {
    if p.numel() != labels.len() {
        return Err(Error::Shape(format!(
            "focal_loss: {} probabilities vs {} labels",
            p.numel(),
            labels.len()
        )));
    }
    if p.numel() == 0 {
        return Err(Error::Shape("focal_loss: empty input".into()));
    }
    let pd = p.data();
    for (i, &v) in pd.iter().enumerate() {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Numeric(format!(
                "focal_loss: p[{i}] = {v} outside (0,1)"
            )));
        }
    }
    let mut s = 0.0;
    for (i, &pv) in pd.iter().enumerate() {
        if labels[i] > 0.5 {
            s += -alpha * (1.0 - pv).powf(gamma) * pv.ln();
        } else {
            s += -(1.0 - alpha) * pv.powf(gamma) * (1.0 - pv).ln();
        }
    }
    let val = s / pd.len() as f64;
    drop(pd);
    Ok(Tensor::node(
        vec![val],
        vec![1],
        Op::FocalLoss { p: p.clone(), labels: labels.to_vec(), alpha, gamma },
    ))
}

fn diou_pair(a: f64, bb: f64, c: f64, d: f64) -> f64 {
    let inter = (bb.min(d) - a.max(c)).max(0.0);
    let union = (bb - a) + (d - c) - inter;
    let enc = bb.max(d) - a.min(c);
    let dc = (a + bb) / 2.0 - (c + d) / 2.0;
    1.0 - inter / union + dc * dc / (enc * enc)
}

/// Distance-IoU loss for 1-D intervals, mean over rows. pred[P,2] carries
/// (start,end) per row and must be non-degenerate; gt likewise (constant).
pub fn diou_loss(pred: &Tensor, gt: &[(f64, f64)]) -> Result<Tensor> {
    let (p_rows, two) = require_2d("diou_loss", pred)?;
    if two != 2 {
        return Err(Error::Shape(format!(
            "diou_loss: pred must be [P,2], got {:?}",
            pred.shape()
        )));
    }
    if gt.len() != p_rows {
        return Err(Error::Shape(format!(
            "diou_loss: {} gt intervals for {} predictions",
            gt.len(),
            p_rows
        )));
    }
    if p_rows == 0 {
        return Err(Error::Shape("diou_loss: empty input".into()));
    }
    let pd = pred.data();
    let mut s = 0.0;
    for (i, &(c, d)) in gt.iter().enumerate() {
        let (a, b) = (pd[i * 2], pd[i * 2 + 1]);
        if !(b > a) {
            return Err(Error::Numeric(format!(
                "diou_loss: degenerate predicted interval ({a}, {b}) at row {i}"
            )));
        }
        if !(d > c) {
            return Err(Error::Numeric(format!(
                "diou_loss: degenerate gt interval ({c}, {d}) at row {i}"
            )));
        }
        s += diou_pair(a, b, c, d);
    }
    let val = s / p_rows as f64;
    let gt_flat: Vec<f64> = gt.iter().flat_map(|&(a, b)| [a, b]).collect();
    drop(pd);
    Ok(Tensor::node(vec![val], vec![1], Op::DiouLoss { pred: pred.clone(), gt: gt_flat }))
}

// ── backward dispatch ───────────────────────────────────────────────────

pub(crate) fn apply_vjp(
    op: &Op,
    out: &Tensor,
    dout: &[f64],
    grads: &mut HashMap<u64, Vec<f64>>,
) -> Result<()> {
    match op {
        Op::Add(a, b) => {
            accumulate(grads, a, dout);
            accumulate(grads, b, dout);
        }
        Op::Sub(a, b) => {
            accumulate(grads, a, dout);
            let neg: Vec<f64> = dout.iter().map(|v| -v).collect();
            accumulate(grads, b, &neg);
        }
        Op::Mul(a, b) => {
            if a.needs_grad() {
                let bd = b.data();
                let da: Vec<f64> = dout.iter().zip(bd.iter()).map(|(g, y)| g * y).collect();
                drop(bd);
                accumulate(grads, a, &da);
            }
            if b.needs_grad() {
                let ad = a.data();
                let db: Vec<f64> = dout.iter().zip(ad.iter()).map(|(g, x)| g * x).collect();
                drop(ad);
                accumulate(grads, b, &db);
            }
        }
        Op::Affine { x, mul, .. } => {
            let dx: Vec<f64> = dout.iter().map(|g| g * mul).collect();
            accumulate(grads, x, &dx);
        }
        Op::AddBias { x, bias } => {
            accumulate(grads, x, dout);
            if bias.needs_grad() {
                let (r, c) = (x.rows(), x.cols());
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += dout[i * c + j];
                    }
                }
                accumulate(grads, bias, &db);
            }
        }
        Op::MulRowVec { x, v } => {
            let (r, c) = (x.rows(), x.cols());
            if x.needs_grad() {
                let vd = v.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = dout[i * c + j] * vd[j];
                    }
                }
                drop(vd);
                accumulate(grads, x, &dx);
            }
            if v.needs_grad() {
                let xd = x.data();
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dv[j] += dout[i * c + j] * xd[i * c + j];
                    }
                }
                drop(xd);
                accumulate(grads, v, &dv);
            }
        }
        Op::Sigmoid(x) => {
            let od = out.data();
            let dx: Vec<f64> =
                dout.iter().zip(od.iter()).map(|(g, y)| g * y * (1.0 - y)).collect();
            drop(od);
            accumulate(grads, x, &dx);
        }
        Op::Softplus(x) => {
            let xd = x.data();
            let dx: Vec<f64> =
                dout.iter().zip(xd.iter()).map(|(g, &v)| g * sigmoid_scalar(v)).collect();
            drop(xd);
            accumulate(grads, x, &dx);
        }
        Op::Silu(x) => {
            let xd = x.data();
            let dx: Vec<f64> = dout
                .iter()
                .zip(xd.iter())
                .map(|(g, &v)| {
                    let s = sigmoid_scalar(v);
                    g * s * (1.0 + v * (1.0 - s))
                })
                .collect();
            drop(xd);
            accumulate(grads, x, &dx);
        }
        Op::RmsNorm { x, gain, eps } => {
            let (t, d) = (x.rows(), x.cols());
            let xd = x.data();
            let g = gain.data();
            let mut dx = vec![0.0; t * d];
            let mut dgain = vec![0.0; d];
            for i in 0..t {
                let row = &xd[i * d..(i + 1) * d];
                let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                let r = (ms + eps).sqrt();
                let gout = &dout[i * d..(i + 1) * d];
                let mut dot = 0.0;
                for j in 0..d {
                    dot += gout[j] * g[j] * row[j];
                }
                for j in 0..d {
                    dx[i * d + j] = g[j] * gout[j] / r - row[j] * dot / (d as f64 * r * r * r);
                    dgain[j] += gout[j] * row[j] / r;
                }
            }
            drop(xd);
            drop(g);
            accumulate(grads, x, &dx);
            accumulate(grads, gain, &dgain);
        }
        Op::NormalizeRows { x, eps } => {
            let (t, d) = (x.rows(), x.cols());
            let xd = x.data();
            let mut dx = vec![0.0; t * d];
            for i in 0..t {
                let row = &xd[i * d..(i + 1) * d];
                let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let gout = &dout[i * d..(i + 1) * d];
                if n <= *eps {
                    // below the clamp the map is x/eps, a constant scale
                    for j in 0..d {
                        dx[i * d + j] = gout[j] / eps;
                    }
                    continue;
                }
                let mut dot = 0.0;
                for j in 0..d {
                    dot += gout[j] * row[j];
                }
                for j in 0..d {
                    dx[i * d + j] = gout[j] / n - row[j] * dot / (n * n * n);
                }
            }
            drop(xd);
            accumulate(grads, x, &dx);
        }
        Op::Matmul { a, b } => {
            let (m, k) = (a.rows(), a.cols());
            let n = b.cols();
            if a.needs_grad() {
                let da = mm_nt(dout, &b.data(), m, n, k);
                accumulate(grads, a, &da);
            }
            if b.needs_grad() {
                let db = mm_tn(&a.data(), dout, m, k, n);
                accumulate(grads, b, &db);
            }
        }
        Op::MatmulNT { a, b } => {
            let (m, k) = (a.rows(), a.cols());
            let n = b.rows();
            if a.needs_grad() {
                let da = mm(dout, &b.data(), m, n, k);
                accumulate(grads, a, &da);
            }
            if b.needs_grad() {
                let db = mm_tn(dout, &a.data(), m, n, k);
                accumulate(grads, b, &db);
            }
        }
        Op::Conv1d { x, kernel, bias } => {
            let (t, din) = (x.rows(), x.cols());
            let k = kernel.shape()[0];
            let dout_dim = kernel.shape()[2];
            let r = k / 2;
            if x.needs_grad() {
                let kd = kernel.data();
                let mut dx = vec![0.0; t * din];
                for i in 0..t {
                    let grow = &dout[i * dout_dim..(i + 1) * dout_dim];
                    for kk in 0..k {
                        let src = i as isize + kk as isize - r as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let dxrow = &mut dx[src as usize * din..(src as usize + 1) * din];
                        for ci in 0..din {
                            let krow = &kd[(kk * din + ci) * dout_dim..(kk * din + ci + 1) * dout_dim];
                            let mut acc = 0.0;
                            for co in 0..dout_dim {
                                acc += krow[co] * grow[co];
                            }
                            dxrow[ci] += acc;
                        }
                    }
                }
                drop(kd);
                accumulate(grads, x, &dx);
            }
            if kernel.needs_grad() {
                let xd = x.data();
                let mut dk = vec![0.0; k * din * dout_dim];
                for i in 0..t {
                    let grow = &dout[i * dout_dim..(i + 1) * dout_dim];
                    for kk in 0..k {
                        let src = i as isize + kk as isize - r as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let xrow = &xd[src as usize * din..(src as usize + 1) * din];
                        for ci in 0..din {
                            let xv = xrow[ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let krow =
                                &mut dk[(kk * din + ci) * dout_dim..(kk * din + ci + 1) * dout_dim];
                            for co in 0..dout_dim {
                                krow[co] += xv * grow[co];
                            }
                        }
                    }
                }
                drop(xd);
                accumulate(grads, kernel, &dk);
            }
            if let Some(b) = bias {
                if b.needs_grad() {
                    let mut db = vec![0.0; dout_dim];
                    for i in 0..t {
                        for co in 0..dout_dim {
                            db[co] += dout[i * dout_dim + co];
                        }
                    }
                    accumulate(grads, b, &db);
                }
            }
        }
        Op::DepthwiseConv1d { x, kernel, bias } => {
            let (t, d) = (x.rows(), x.cols());
            let k = kernel.shape()[0];
            let r = k / 2;
            if x.needs_grad() {
                let kd = kernel.data();
                let mut dx = vec![0.0; t * d];
                for i in 0..t {
                    let grow = &dout[i * d..(i + 1) * d];
                    for kk in 0..k {
                        let src = i as isize + kk as isize - r as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let krow = &kd[kk * d..(kk + 1) * d];
                        let dxrow = &mut dx[src as usize * d..(src as usize + 1) * d];
                        for ci in 0..d {
                            dxrow[ci] += krow[ci] * grow[ci];
                        }
                    }
                }
                drop(kd);
                accumulate(grads, x, &dx);
            }
            if kernel.needs_grad() {
                let xd = x.data();
                let mut dk = vec![0.0; k * d];
                for i in 0..t {
                    let grow = &dout[i * d..(i + 1) * d];
                    for kk in 0..k {
                        let src = i as isize + kk as isize - r as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let xrow = &xd[src as usize * d..(src as usize + 1) * d];
                        let krow = &mut dk[kk * d..(kk + 1) * d];
                        for ci in 0..d {
                            krow[ci] += xrow[ci] * grow[ci];
                        }
                    }
                }
                drop(xd);
                accumulate(grads, kernel, &dk);
            }
            if let Some(b) = bias {
                if b.needs_grad() {
                    let mut db = vec![0.0; d];
                    for i in 0..t {
                        for ci in 0..d {
                            db[ci] += dout[i * d + ci];
                        }
                    }
                    accumulate(grads, b, &db);
                }
            }
        }
        Op::ReverseRows(x) => {
            let (t, d) = (x.rows(), x.cols());
            let mut dx = vec![0.0; t * d];
            for i in 0..t {
                dx[(t - 1 - i) * d..(t - i) * d].copy_from_slice(&dout[i * d..(i + 1) * d]);
            }
            accumulate(grads, x, &dx);
        }
        Op::SelectRows { x, idx } => {
            let (t, d) = (x.rows(), x.cols());
            let mut dx = vec![0.0; t * d];
            for (o, &i) in idx.iter().enumerate() {
                for j in 0..d {
                    dx[i * d + j] += dout[o * d + j];
                }
            }
            accumulate(grads, x, &dx);
        }
        Op::ConcatRows { xs } => {
            let mut offset = 0;
            for x in xs {
                let len = x.numel();
                if x.needs_grad() {
                    accumulate(grads, x, &dout[offset..offset + len]);
                }
                offset += len;
            }
        }
        Op::WindowPoolMean { x, stride } => {
            let (l, d) = (x.rows(), x.cols());
            let m = l.div_ceil(*stride);
            let mut dx = vec![0.0; l * d];
            for w in 0..m {
                let lo = w * stride;
                let hi = ((w + 1) * stride).min(l);
                let cnt = (hi - lo) as f64;
                for i in lo..hi {
                    for j in 0..d {
                        dx[i * d + j] += dout[w * d + j] / cnt;
                    }
                }
            }
            accumulate(grads, x, &dx);
        }
        Op::WindowPoolMax { x, stride, argmax } => {
            let (l, d) = (x.rows(), x.cols());
            let m = l.div_ceil(*stride);
            let mut dx = vec![0.0; l * d];
            for w in 0..m {
                for j in 0..d {
                    dx[argmax[w * d + j] * d + j] += dout[w * d + j];
                }
            }
            accumulate(grads, x, &dx);
        }
        Op::MeanRows(x) => {
            let (r, c) = (x.rows(), x.cols());
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = dout[j] / r as f64;
                }
            }
            accumulate(grads, x, &dx);
        }
        Op::SumAll(x) => {
            let dx = vec![dout[0]; x.numel()];
            accumulate(grads, x, &dx);
        }
        Op::MeanAll(x) => {
            let dx = vec![dout[0] / x.numel() as f64; x.numel()];
            accumulate(grads, x, &dx);
        }
        Op::MaskedLogsumexp { x, masks } => {
            let (r, c) = (x.rows(), x.cols());
            let xd = x.data();
            let mut dx = vec![0.0; r * c];
            for (i, m) in masks.iter().enumerate() {
                let row = &xd[i * c..(i + 1) * c];
                let mx = m.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = m.iter().map(|&j| (row[j] - mx).exp()).sum();
                for &j in m {
                    dx[i * c + j] += dout[i] * (row[j] - mx).exp() / z;
                }
            }
            drop(xd);
            accumulate(grads, x, &dx);
        }
        Op::CrossAttention { q, k, v, heads, weights } => {
            let (tq, d) = (q.rows(), q.cols());
            let tk = k.rows();
            let dh = d / heads;
            let scl = 1.0 / (dh as f64).sqrt();
            let qd = q.data();
            let kd = k.data();
            let vd = v.data();
            let mut dq = vec![0.0; tq * d];
            let mut dk = vec![0.0; tk * d];
            let mut dv = vec![0.0; tk * d];
            let mut dw = vec![0.0; tk];
            for h in 0..*heads {
                let off = h * dh;
                for i in 0..tq {
                    let wrow = &weights[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                    let grow = &dout[i * d + off..i * d + off + dh];
                    let mut wdot = 0.0;
                    for j in 0..tk {
                        let vrow = &vd[j * d + off..j * d + off + dh];
                        let mut acc = 0.0;
                        for l in 0..dh {
                            acc += grow[l] * vrow[l];
                        }
                        dw[j] = acc;
                        wdot += wrow[j] * acc;
                        let dvrow = &mut dv[j * d + off..j * d + off + dh];
                        for l in 0..dh {
                            dvrow[l] += wrow[j] * grow[l];
                        }
                    }
                    let qrow = &qd[i * d + off..i * d + off + dh];
                    let dqrow = &mut dq[i * d + off..i * d + off + dh];
                    for j in 0..tk {
                        let ds = wrow[j] * (dw[j] - wdot) * scl;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = &kd[j * d + off..j * d + off + dh];
                        let dkrow = &mut dk[j * d + off..j * d + off + dh];
                        for l in 0..dh {
                            dqrow[l] += ds * krow[l];
                            dkrow[l] += ds * qrow[l];
                        }
                    }
                }
            }
            drop(qd);
            drop(kd);
            drop(vd);
            accumulate(grads, q, &dq);
            accumulate(grads, k, &dk);
            accumulate(grads, v, &dv);
        }
        Op::WindowedAttention { q, k, v, relbias, window, heads, weights } => {
            let (t, d) = (q.rows(), q.cols());
            let r = (window - 1) / 2;
            let dh = d / heads;
            let scl = 1.0 / (dh as f64).sqrt();
            let qd = q.data();
            let kd = k.data();
            let vd = v.data();
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut dbias = vec![0.0; heads * window];
            let mut dw = vec![0.0; *window];
            for h in 0..*heads {
                let off = h * dh;
                for i in 0..t {
                    let lo = i.saturating_sub(r);
                    let hi = (i + r + 1).min(t);
                    let wbase = (h * t + i) * window;
                    let grow = &dout[i * d + off..i * d + off + dh];
                    let mut wdot = 0.0;
                    for j in lo..hi {
                        let w = weights[wbase + (j + r - i)];
                        let vrow = &vd[j * d + off..j * d + off + dh];
                        let mut acc = 0.0;
                        for l in 0..dh {
                            acc += grow[l] * vrow[l];
                        }
                        dw[j - lo] = acc;
                        wdot += w * acc;
                        let dvrow = &mut dv[j * d + off..j * d + off + dh];
                        for l in 0..dh {
                            dvrow[l] += w * grow[l];
                        }
                    }
                    let qrow = &qd[i * d + off..i * d + off + dh];
                    let dqrow = &mut dq[i * d + off..i * d + off + dh];
                    for j in lo..hi {
                        let w = weights[wbase + (j + r - i)];
                        let ds = w * (dw[j - lo] - wdot);
                        dbias[h * window + (j + r - i)] += ds;
                        let dsk = ds * scl;
                        if dsk == 0.0 {
                            continue;
                        }
                        let krow = &kd[j * d + off..j * d + off + dh];
                        let dkrow = &mut dk[j * d + off..j * d + off + dh];
                        for l in 0..dh {
                            dqrow[l] += dsk * krow[l];
                            dkrow[l] += dsk * qrow[l];
                        }
                    }
                }
            }
            drop(qd);
            drop(kd);
            drop(vd);
            accumulate(grads, q, &dq);
            accumulate(grads, k, &dk);
            accumulate(grads, v, &dv);
            accumulate(grads, relbias, &dbias);
        }
        Op::SelectiveScanCore { xt, b, c, delta, a, zoh, states } => {
            let (t, dc) = (xt.rows(), xt.cols());
            let n = a.numel();
            let xd = xt.data();
            let bd = b.data();
            let cd = c.data();
            let dd = delta.data();
            let ad = a.data();
            let mut dx = vec![0.0; t * dc];
            let mut db = vec![0.0; t * n];
            let mut dcm = vec![0.0; t * n];
            let mut ddelta = vec![0.0; t];
            let mut da = vec![0.0; n];
            // lam[d,n]: dL/dh_k flowing backward per channel.
            let mut lam = vec![0.0; dc * n];
            for k in (0..t).rev() {
                let dt = dd[k];
                let brow = &bd[k * n..(k + 1) * n];
                let crow = &cd[k * n..(k + 1) * n];
                let hk = &states[k * dc * n..(k + 1) * dc * n];
                let hprev: Option<&[f64]> = if k > 0 {
                    Some(&states[(k - 1) * dc * n..k * dc * n])
                } else {
                    None
                };
                for d in 0..dc {
                    let gy = dout[k * dc + d];
                    let xv = xd[k * dc + d];
                    let lrow = &mut lam[d * n..(d + 1) * n];
                    let hrow = &hk[d * n..(d + 1) * n];
                    for nn in 0..n {
                        // y[k,d] = c_k . h_k
                        dcm[k * n + nn] += gy * hrow[nn];
                        lrow[nn] += gy * crow[nn];
                    }
                    let mut dxv = 0.0;
                    let mut ddt = 0.0;
                    if *zoh {
                        for nn in 0..n {
                            let hp = hprev.map_or(0.0, |h| h[d * n + nn]);
                            let decay = (dt * ad[nn]).exp();
                            let l = lrow[nn];
                            ddt += l * (ad[nn] * decay * hp + brow[nn] * xv);
                            da[nn] += l * dt * decay * hp;
                            db[k * n + nn] += l * dt * xv;
                            dxv += l * dt * brow[nn];
                            lrow[nn] = decay * l;
                        }
                    } else {
                        for nn in 0..n {
                            let hp = hprev.map_or(0.0, |h| h[d * n + nn]);
                            let l = lrow[nn];
                            // h_k = dt * (a h_prev + b_k x)
                            ddt += l * (ad[nn] * hp + brow[nn] * xv);
                            da[nn] += l * dt * hp;
                            db[k * n + nn] += l * dt * xv;
                            dxv += l * dt * brow[nn];
                            lrow[nn] = dt * ad[nn] * l;
                        }
                    }
                    dx[k * dc + d] += dxv;
                    ddelta[k] += ddt;
                }
            }
            drop(xd);
            drop(bd);
            drop(cd);
            drop(dd);
            drop(ad);
            accumulate(grads, xt, &dx);
            accumulate(grads, b, &db);
            accumulate(grads, c, &dcm);
            accumulate(grads, delta, &ddelta);
            accumulate(grads, a, &da);
        }
        Op::FixedScan { x, a, b, c, d, h0, states } => {
            let (t, din) = (x.rows(), x.cols());
            let n = h0.numel();
            let dout_dim = c.rows();
            let xd = x.data();
            let ad = a.data();
            let bd = b.data();
            let cd = c.data();
            let dd = d.data();
            let h0d = h0.data();
            let mut dx = vec![0.0; t * din];
            let mut da = vec![0.0; n * n];
            let mut db = vec![0.0; n * din];
            let mut dcm = vec![0.0; dout_dim * n];
            let mut ddm = vec![0.0; dout_dim * din];
            let mut dh0 = vec![0.0; n];
            let mut lam = vec![0.0; n];
            let mut lam_next = vec![0.0; n];
            for k in (0..t).rev() {
                let xrow = &xd[k * din..(k + 1) * din];
                let hk = &states[k * n..(k + 1) * n];
                let gy = &dout[k * dout_dim..(k + 1) * dout_dim];
                for o in 0..dout_dim {
                    let g = gy[o];
                    if g == 0.0 {
                        continue;
                    }
                    for nn in 0..n {
                        dcm[o * n + nn] += g * hk[nn];
                        lam[nn] += g * cd[o * n + nn];
                    }
                    for j in 0..din {
                        ddm[o * din + j] += g * xrow[j];
                        dx[k * din + j] += g * dd[o * din + j];
                    }
                }
                let hprev: &[f64] = if k > 0 { &states[(k - 1) * n..k * n] } else { &h0d };
                for nn in 0..n {
                    let l = lam[nn];
                    if l == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        da[nn * n + j] += l * hprev[j];
                    }
                    for j in 0..din {
                        db[nn * din + j] += l * xrow[j];
                        dx[k * din + j] += l * bd[nn * din + j];
                    }
                }
                // lam <- a^T lam
                for j in 0..n {
                    let mut acc = 0.0;
                    for nn in 0..n {
                        acc += ad[nn * n + j] * lam[nn];
                    }
                    lam_next[j] = acc;
                }
                std::mem::swap(&mut lam, &mut lam_next);
            }
            dh0.copy_from_slice(&lam);
            drop(xd);
            drop(ad);
            drop(bd);
            drop(cd);
            drop(dd);
            drop(h0d);
            accumulate(grads, x, &dx);
            accumulate(grads, a, &da);
            accumulate(grads, b, &db);
            accumulate(grads, c, &dcm);
            accumulate(grads, d, &ddm);
            accumulate(grads, h0, &dh0);
        }
        Op::FocalLoss { p, labels, alpha, gamma } => {
            let pd = p.data();
            let nf = pd.len() as f64;
            let g = dout[0] / nf;
            let mut dp = vec![0.0; pd.len()];
            for (i, &pv) in pd.iter().enumerate() {
                let d = if labels[i] > 0.5 {
                    let pow_term = if *gamma == 0.0 {
                        0.0
                    } else {
                        gamma * (1.0 - pv).powf(gamma - 1.0)
                    };
                    alpha * pow_term * pv.ln() - alpha * (1.0 - pv).powf(*gamma) / pv
                } else {
                    let pow_term = if *gamma == 0.0 { 0.0 } else { gamma * pv.powf(gamma - 1.0) };
                    -(1.0 - alpha) * pow_term * (1.0 - pv).ln()
                        + (1.0 - alpha) * pv.powf(*gamma) / (1.0 - pv)
                };
                dp[i] = g * d;
            }
            drop(pd);
            accumulate(grads, p, &dp);
        }
        Op::DiouLoss { pred, gt } => {
            let rows = pred.rows();
            let pd = pred.data();
            let g = dout[0] / rows as f64;
            let mut dp = vec![0.0; rows * 2];
            for i in 0..rows {
                let (a, b) = (pd[i * 2], pd[i * 2 + 1]);
                let (c, d) = (gt[i * 2], gt[i * 2 + 1]);
                let raw_inter = b.min(d) - a.max(c);
                let inter = raw_inter.max(0.0);
                let union = (b - a) + (d - c) - inter;
                let enc = b.max(d) - a.min(c);
                let dc_ = (a + b) / 2.0 - (c + d) / 2.0;
                // d inter / d a,b with ties broken toward the pred branch
                let (di_da, di_db) = if raw_inter > 0.0 {
                    (if a >= c { -1.0 } else { 0.0 }, if b <= d { 1.0 } else { 0.0 })
                } else {
                    (0.0, 0.0)
                };
                let du_da = -1.0 - di_da;
                let du_db = 1.0 - di_db;
                let diou_da = (di_da * union - inter * du_da) / (union * union);
                let diou_db = (di_db * union - inter * du_db) / (union * union);
                let de_da = if a <= c { -1.0 } else { 0.0 };
                let de_db = if b >= d { 1.0 } else { 0.0 };
                let dpen_da = dc_ / (enc * enc) - 2.0 * dc_ * dc_ * de_da / (enc * enc * enc);
                let dpen_db = dc_ / (enc * enc) - 2.0 * dc_ * dc_ * de_db / (enc * enc * enc);
                dp[i * 2] = g * (-diou_da + dpen_da);
                dp[i * 2 + 1] = g * (-diou_db + dpen_db);
            }
            drop(pd);
            accumulate(grads, pred, &dp);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn assert_close(actual: &[f64], expected: &[f64], tol: f64, msg: &str) {
        assert_eq!(actual.len(), expected.len(), "{msg}: length mismatch");
        for (i, (a, e)) in actual.iter().zip(expected.iter()).enumerate() {
            assert!(
                (a - e).abs() <= tol,
                "{msg}: index {i}, actual {a}, expected {e}, diff {}",
                (a - e).abs()
            );
        }
    }

    #[test]
    fn add_and_mul_forward() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let b = Tensor::from_vec(vec![4.0, 5.0, 6.0], &[3]).unwrap();
        assert_eq!(add(&a, &b).unwrap().to_vec(), vec![5.0, 7.0, 9.0]);
        assert_eq!(mul(&a, &b).unwrap().to_vec(), vec![4.0, 10.0, 18.0]);
        assert!(add(&a, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn matmul_forward_small() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
        let cnt = matmul_nt(&a, &b).unwrap();
        // a @ b^T
        assert_eq!(cnt.to_vec(), vec![17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn rms_norm_matches_formula() {
        let x = Tensor::from_vec(vec![3.0, 4.0], &[1, 2]).unwrap();
        let g = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let out = rms_norm(&x, &g, 0.0).unwrap();
        // rms = sqrt((9+16)/2) = sqrt(12.5)
        let r = 12.5f64.sqrt();
        assert_close(&out.to_vec(), &[3.0 / r, 8.0 / r], 1e-12, "rms_norm");
    }

    #[test]
    fn rms_norm_shape_error_names_both_shapes() {
        let x = Tensor::zeros(&[2, 3]);
        let g = Tensor::zeros(&[4]);
        let err = rms_norm(&x, &g, 1e-6).unwrap_err().to_string();
        assert!(err.contains("[4]") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[6, 3], &mut rng);
        // K=1 identity: kernel[0,i,o] = delta(i,o)
        let mut kd = vec![0.0; 9];
        for i in 0..3 {
            kd[i * 3 + i] = 1.0;
        }
        let kernel = Tensor::from_vec(kd, &[1, 3, 3]).unwrap();
        let out = conv1d(&x, &kernel, None).unwrap();
        assert_close(&out.to_vec(), &x.to_vec(), 1e-15, "conv1d identity");
    }

    #[test]
    fn conv1d_box_filter_zero_padding() {
        // ones kernel [3,1,1] over x = [1,1,1,1,1] -> [2,3,3,3,2]
        let x = Tensor::ones(&[5, 1]);
        let kernel = Tensor::ones(&[3, 1, 1]);
        let out = conv1d(&x, &kernel, None).unwrap();
        assert_eq!(out.to_vec(), vec![2.0, 3.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        let x = Tensor::zeros(&[4, 2]);
        let kernel = Tensor::zeros(&[2, 2, 2]);
        assert!(conv1d(&x, &kernel, None).is_err());
    }

    #[test]
    fn select_and_concat_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[5, 2], &mut rng);
        let top = select_rows(&x, &[0, 1]).unwrap();
        let rest = select_rows(&x, &[2, 3, 4]).unwrap();
        let back = concat_rows(&[top, rest]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn window_pool_mean_short_tail() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0], &[5, 1]).unwrap();
        let out = window_pool_mean(&x, 2).unwrap();
        assert_eq!(out.shape(), &[3, 1]);
        assert_close(&out.to_vec(), &[1.5, 3.5, 5.0], 1e-15, "pool mean");
    }

    #[test]
    fn window_pool_max_routes_gradient_to_argmax() {
        let x = Tensor::param_from_vec(vec![1.0, 5.0, 2.0], &[3, 1]).unwrap();
        let out = window_pool_max(&x, 3).unwrap();
        assert_eq!(out.to_vec(), vec![5.0]);
        sum_all(&out).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn masked_logsumexp_matches_naive() {
        let x = Tensor::from_vec(vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0], &[2, 3]).unwrap();
        let masks = vec![vec![0, 2], vec![1]];
        let out = masked_logsumexp(&x, &masks).unwrap();
        let e0 = (0.5f64.exp() + 2.0f64.exp()).ln();
        assert_close(&out.to_vec(), &[e0, 1.0], 1e-12, "masked lse");
        assert!(masked_logsumexp(&x, &[vec![], vec![0]]).is_err());
    }

    #[test]
    fn cross_attention_single_key_copies_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::randn(&[3, 4], &mut rng);
        let k = Tensor::randn(&[1, 4], &mut rng);
        let v = Tensor::randn(&[1, 4], &mut rng);
        let out = cross_attention(&q, &k, &v, 2).unwrap();
        let vd = v.to_vec();
        for i in 0..3 {
            assert_close(&out.to_vec()[i * 4..(i + 1) * 4], &vd, 1e-12, "single key");
        }
    }

    #[test]
    fn windowed_attention_rejects_bad_config() {
        let x = Tensor::zeros(&[4, 6]);
        let bias = Tensor::zeros(&[2, 4]);
        assert!(windowed_attention(&x, &x, &x, &bias, 4, 2).is_err()); // even window
        let bias5 = Tensor::zeros(&[2, 5]);
        assert!(windowed_attention(&x, &x, &x, &bias5, 5, 4).is_err()); // 4 does not divide 6
        assert!(windowed_attention(&x, &x, &x, &bias, 5, 2).is_err()); // bias shape
    }

    #[test]
    fn selective_scan_core_rejects_nan() {
        let x = Tensor::from_vec(vec![f64::NAN, 0.0], &[1, 2]).unwrap();
        let b = Tensor::zeros(&[1, 2]);
        let c = Tensor::zeros(&[1, 2]);
        let dt = Tensor::ones(&[1, 1]);
        let a = Tensor::zeros(&[2]);
        let err = selective_scan_core(&x, &b, &c, &dt, &a, false).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn fixed_scan_reports_divergence_step() {
        // spectral radius 2 -> overflow after ~1e3 steps on unit input
        let t = 2000;
        let x = Tensor::ones(&[t, 1]);
        let a = Tensor::from_vec(vec![2.0], &[1, 1]).unwrap();
        let b = Tensor::ones(&[1, 1]);
        let c = Tensor::ones(&[1, 1]);
        let d = Tensor::zeros(&[1, 1]);
        let h0 = Tensor::zeros(&[1]);
        let err = fixed_scan(&x, &a, &b, &c, &d, &h0).unwrap_err().to_string();
        assert!(err.contains("step"), "{err}");
    }

    #[test]
    fn focal_loss_rejects_out_of_range() {
        let p = Tensor::from_vec(vec![0.5, 1.0], &[2]).unwrap();
        let err = focal_loss(&p, &[1.0, 0.0], 0.25, 2.0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn diou_loss_worked_example() {
        // pred (0,1), gt (2,3): IoU 0, centers 2 apart, enclosure 3
        // -> 1 - 0 + 4/9 = 1.4444...
        let pred = Tensor::from_vec(vec![0.0, 1.0], &[1, 2]).unwrap();
        let loss = diou_loss(&pred, &[(2.0, 3.0)]).unwrap();
        assert_close(&[loss.item().unwrap()], &[1.0 + 4.0 / 9.0], 1e-12, "diou");
    }

    #[test]
    fn diou_loss_perfect_overlap_is_zero() {
        let pred = Tensor::from_vec(vec![2.0, 5.0], &[1, 2]).unwrap();
        let loss = diou_loss(&pred, &[(2.0, 5.0)]).unwrap();
        assert!(loss.item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn diou_loss_rejects_degenerate() {
        let pred = Tensor::from_vec(vec![3.0, 3.0], &[1, 2]).unwrap();
        assert!(diou_loss(&pred, &[(2.0, 5.0)]).is_err());
    }

    // ── per-op gradient property suite ──────────────────────────────
    //
    // Every differentiable primitive is finite-difference checked on
    // random small shapes over 20 seeds at tol 1e-4.

    use crate::gradcheck::grad_check;
    use crate::nn::Parameter;

    const SEEDS: u64 = 20;

    fn p(name: &str, t: &Tensor) -> Parameter {
        Parameter { name: name.into(), t: t.clone() }
    }

    fn check_grads(label: &str, params: &[Parameter], f: impl Fn() -> Result<Tensor>) {
        let report = grad_check(&f, params, 1e-5, 1e-4)
            .unwrap_or_else(|e| panic!("{label}: grad_check errored: {e}"));
        assert!(report.pass(), "{label}:\n{}", report.format_table());
    }

    fn sq_loss(t: &Tensor) -> Result<Tensor> {
        sum_all(&mul(t, t)?)
    }

    #[test]
    fn grads_elementwise_ops() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[3, 4], &mut rng).requires_grad();
            let b = Tensor::randn(&[3, 4], &mut rng).requires_grad();
            let params = [p("a", &a), p("b", &b)];
            let (a2, b2) = (a.clone(), b.clone());
            check_grads("add", &params, move || sq_loss(&add(&a2, &b2)?));
            let (a2, b2) = (a.clone(), b.clone());
            check_grads("sub", &params, move || sq_loss(&sub(&a2, &b2)?));
            let (a2, b2) = (a.clone(), b.clone());
            check_grads("mul", &params, move || sq_loss(&mul(&a2, &b2)?));
            let a2 = a.clone();
            check_grads("affine", &params[..1], move || sq_loss(&affine(&a2, -1.7, 0.3)?));
            let a2 = a.clone();
            check_grads("sigmoid", &params[..1], move || sq_loss(&sigmoid(&a2)?));
            let a2 = a.clone();
            check_grads("softplus", &params[..1], move || sq_loss(&softplus(&a2)?));
            let a2 = a.clone();
            check_grads("silu", &params[..1], move || sq_loss(&silu(&a2)?));
        }
    }

    #[test]
    fn grads_broadcast_ops() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = Tensor::randn(&[4, 3], &mut rng).requires_grad();
            let v = Tensor::randn(&[3], &mut rng).requires_grad();
            let params = [p("x", &x), p("v", &v)];
            let (x2, v2) = (x.clone(), v.clone());
            check_grads("add_bias", &params, move || sq_loss(&add_bias(&x2, &v2)?));
            let (x2, v2) = (x.clone(), v.clone());
            check_grads("mul_rowvec", &params, move || sq_loss(&mul_rowvec(&x2, &v2)?));
        }
    }

    #[test]
    fn grads_normalization_ops() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let x = Tensor::randn(&[5, 4], &mut rng).requires_grad();
            let g = Tensor::randn(&[4], &mut rng).requires_grad();
            let params = [p("x", &x), p("g", &g)];
            let (x2, g2) = (x.clone(), g.clone());
            check_grads("rms_norm", &params, move || sq_loss(&rms_norm(&x2, &g2, 1e-5)?));
            let x2 = x.clone();
            check_grads("normalize_rows", &params[..1], move || {
                sq_loss(&normalize_rows(&x2, 1e-8)?)
            });
        }
    }

    #[test]
    fn grads_matmul_ops() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let a = Tensor::randn(&[3, 4], &mut rng).requires_grad();
            let b = Tensor::randn(&[4, 2], &mut rng).requires_grad();
            let bt = Tensor::randn(&[2, 4], &mut rng).requires_grad();
            let (a2, b2) = (a.clone(), b.clone());
            check_grads("matmul", &[p("a", &a), p("b", &b)], move || {
                sq_loss(&matmul(&a2, &b2)?)
            });
            let (a2, b2) = (a.clone(), bt.clone());
            check_grads("matmul_nt", &[p("a", &a), p("bt", &bt)], move || {
                sq_loss(&matmul_nt(&a2, &b2)?)
            });
        }
    }

    #[test]
    fn grads_conv_ops() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let x = Tensor::randn(&[6, 3], &mut rng).requires_grad();
            let kernel = Tensor::randn(&[3, 3, 2], &mut rng).requires_grad();
            let bias = Tensor::randn(&[2], &mut rng).requires_grad();
            let params = [p("x", &x), p("kernel", &kernel), p("bias", &bias)];
            let (x2, k2, b2) = (x.clone(), kernel.clone(), bias.clone());
            check_grads("conv1d", &params, move || sq_loss(&conv1d(&x2, &k2, Some(&b2))?));

            let dk = Tensor::randn(&[5, 3], &mut rng).requires_grad();
            let db = Tensor::randn(&[3], &mut rng).requires_grad();
            let params = [p("x", &x), p("dk", &dk), p("db", &db)];
            let (x2, k2, b2) = (x.clone(), dk.clone(), db.clone());
            check_grads("depthwise_conv1d", &params, move || {
                sq_loss(&depthwise_conv1d(&x2, &k2, Some(&b2))?)
            });
        }
    }

    #[test]
    fn grads_indexing_ops() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let x = Tensor::randn(&[5, 3], &mut rng).requires_grad();
            let y = Tensor::randn(&[2, 3], &mut rng).requires_grad();
            let params = [p("x", &x), p("y", &y)];
            let x2 = x.clone();
            check_grads("reverse_rows", &params[..1], move || sq_loss(&reverse_rows(&x2)?));
            let x2 = x.clone();
            // repeated index exercises scatter accumulation
            check_grads("select_rows", &params[..1], move || {
                sq_loss(&select_rows(&x2, &[4, 0, 2, 0])?)
            });
            let (x2, y2) = (x.clone(), y.clone());
            check_grads("concat_rows", &params, move || {
                sq_loss(&concat_rows(&[x2.clone(), y2.clone()])?)
            });
        }
    }

    #[test]
    fn grads_pooling_and_reduction_ops() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
            let x = Tensor::randn(&[7, 3], &mut rng).requires_grad();
            let params = [p("x", &x)];
            let x2 = x.clone();
            check_grads("window_pool_mean", &params, move || {
                sq_loss(&window_pool_mean(&x2, 3)?)
            });
            let x2 = x.clone();
            check_grads("window_pool_max", &params, move || {
                sq_loss(&window_pool_max(&x2, 3)?)
            });
            let x2 = x.clone();
            check_grads("mean_rows", &params, move || sq_loss(&mean_rows(&x2)?));
            let x2 = x.clone();
            check_grads("sum_all", &params, move || sq_loss(&sum_all(&x2)?));
            let x2 = x.clone();
            check_grads("mean_all", &params, move || sq_loss(&mean_all(&x2)?));
        }
    }

    #[test]
    fn grads_masked_logsumexp() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
            let x = Tensor::randn(&[3, 5], &mut rng).requires_grad();
            let masks = vec![vec![0, 2, 4], vec![1], vec![0, 1, 2, 3, 4]];
            let params = [p("x", &x)];
            let x2 = x.clone();
            let m2 = masks.clone();
            check_grads("masked_logsumexp", &params, move || {
                sq_loss(&masked_logsumexp(&x2, &m2)?)
            });
        }
    }

    #[test]
    fn grads_attention_ops() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
            let q = Tensor::randn(&[4, 6], &mut rng).requires_grad();
            let k = Tensor::randn(&[3, 6], &mut rng).requires_grad();
            let v = Tensor::randn(&[3, 6], &mut rng).requires_grad();
            let params = [p("q", &q), p("k", &k), p("v", &v)];
            let (q2, k2, v2) = (q.clone(), k.clone(), v.clone());
            check_grads("cross_attention", &params, move || {
                sq_loss(&cross_attention(&q2, &k2, &v2, 2)?)
            });

            let qs = Tensor::randn(&[7, 6], &mut rng).requires_grad();
            let ks = Tensor::randn(&[7, 6], &mut rng).requires_grad();
            let vs = Tensor::randn(&[7, 6], &mut rng).requires_grad();
            let bias = Tensor::randn(&[3, 5], &mut rng).requires_grad();
            let params =
                [p("qs", &qs), p("ks", &ks), p("vs", &vs), p("bias", &bias)];
            let (q2, k2, v2, b2) = (qs.clone(), ks.clone(), vs.clone(), bias.clone());
            check_grads("windowed_attention", &params, move || {
                sq_loss(&windowed_attention(&q2, &k2, &v2, &b2, 5, 3)?)
            });
        }
    }

    #[test]
    fn grads_selective_scan_core_both_variants() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
            let xt = Tensor::randn(&[5, 3], &mut rng).requires_grad();
            let b = Tensor::randn(&[5, 2], &mut rng).requires_grad();
            let c = Tensor::randn(&[5, 2], &mut rng).requires_grad();
            let delta = Tensor::rand_uniform(&[5], 0.1, 1.0, &mut rng).requires_grad();
            let a = Tensor::rand_uniform(&[2], -1.0, -0.01, &mut rng).requires_grad();
            let params =
                [p("xt", &xt), p("b", &b), p("c", &c), p("delta", &delta), p("a", &a)];
            for zoh in [false, true] {
                let (x2, b2, c2, d2, a2) =
                    (xt.clone(), b.clone(), c.clone(), delta.clone(), a.clone());
                check_grads(if zoh { "scan_zoh" } else { "scan_default" }, &params, move || {
                    sq_loss(&selective_scan_core(&x2, &b2, &c2, &d2, &a2, zoh)?)
                });
            }
        }
    }

    #[test]
    fn grads_fixed_scan() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x = Tensor::randn(&[6, 2], &mut rng).requires_grad();
            let a = affine(&Tensor::randn(&[3, 3], &mut rng), 0.3, 0.0)
                .unwrap()
                .requires_grad();
            let b = Tensor::randn(&[3, 2], &mut rng).requires_grad();
            let c = Tensor::randn(&[2, 3], &mut rng).requires_grad();
            let d = Tensor::randn(&[2, 2], &mut rng).requires_grad();
            let h0 = Tensor::randn(&[3], &mut rng).requires_grad();
            let params = [
                p("x", &x),
                p("a", &a),
                p("b", &b),
                p("c", &c),
                p("d", &d),
                p("h0", &h0),
            ];
            let (x2, a2, b2, c2, d2, h2) =
                (x.clone(), a.clone(), b.clone(), c.clone(), d.clone(), h0.clone());
            check_grads("fixed_scan", &params, move || {
                sq_loss(&fixed_scan(&x2, &a2, &b2, &c2, &d2, &h2)?)
            });
        }
    }

    #[test]
    fn grads_loss_ops() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(1100 + seed);
            let prob = Tensor::rand_uniform(&[6], 0.05, 0.95, &mut rng).requires_grad();
            let labels: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
            let params = [p("prob", &prob)];
            let (p2, l2) = (prob.clone(), labels.clone());
            check_grads("focal_loss", &params, move || focal_loss(&p2, &l2, 0.25, 2.0));
            let (p2, l2) = (prob.clone(), labels);
            check_grads("focal_loss_gamma0", &params, move || focal_loss(&p2, &l2, 0.5, 0.0));

            // intervals with margin so FD perturbation cannot cross a kink
            let mut pd = Vec::new();
            let mut gt = Vec::new();
            for _ in 0..4 {
                let a: f64 = rng.gen_range(0.0..3.0);
                let b = a + rng.gen_range(0.5..2.0);
                pd.extend_from_slice(&[a, b]);
                let c: f64 = rng.gen_range(0.0..3.0);
                gt.push((c, c + rng.gen_range(0.5..2.0)));
            }
            let pred = Tensor::param_from_vec(pd, &[4, 2]).unwrap();
            let params = [p("pred", &pred)];
            let (p2, g2) = (pred.clone(), gt.clone());
            check_grads("diou_loss", &params, move || diou_loss(&p2, &g2));
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad of (2f + 3g) == 2 grad f + 3 grad g
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::randn(&[3, 3], &mut rng).requires_grad();
        let f = || sum_all(&mul(&x, &x).unwrap()).unwrap();
        let g = || sum_all(&sigmoid(&x).unwrap()).unwrap();

        f().backward().unwrap();
        let gf = x.grad().unwrap();
        x.zero_grad();
        g().backward().unwrap();
        let gg = x.grad().unwrap();
        x.zero_grad();

        let combined = add(
            &affine(&f(), 2.0, 0.0).unwrap(),
            &affine(&g(), 3.0, 0.0).unwrap(),
        )
        .unwrap();
        combined.backward().unwrap();
        let gc = x.grad().unwrap();
        let expect: Vec<f64> = gf.iter().zip(&gg).map(|(a, b)| 2.0 * a + 3.0 * b).collect();
        assert_close(&gc, &expect, 1e-12, "linearity");
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let x = Tensor::randn(&[6, 4], &mut rng);
            let g = Tensor::randn(&[4], &mut rng);
            let k = Tensor::randn(&[3, 4], &mut rng);
            let y = rms_norm(&x, &g, 1e-6).unwrap();
            let y = depthwise_conv1d(&y, &k, None).unwrap();
            let y = silu(&y).unwrap();
            sum_all(&y).unwrap().item().unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
