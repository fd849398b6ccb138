//! Test oracles: independent scalar re-implementations used to verify the
//! graph-based code paths. Everything here works on plain slices with naive
//! loops and must stay decoupled from `ops`/`tensor`. Not part of the
//! library API.
#![doc(hidden)]

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Weights of one selective scan layer, as raw row-major slices.
pub struct SelectiveWeights<'a> {
    pub w_in: &'a [f64],   // [d_in, d_inner]
    pub conv_k: &'a [f64], // [d_conv, d_inner]
    pub conv_b: &'a [f64], // [d_inner]
    pub w_b: &'a [f64],    // [d_inner, n]
    pub w_c: &'a [f64],    // [d_inner, n]
    pub w_dt: &'a [f64],   // [d_inner, 1]
    pub b_dt: &'a [f64],   // [1]
    pub a: &'a [f64],      // [n]
    pub w_out: &'a [f64],  // [d_inner, d_out]
}

/// Step-by-step selective scan: projection, conv, per-channel recurrence,
/// readout, output projection. Returns y[t, d_out].
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_oracle(
    x: &[f64],
    t: usize,
    d_in: usize,
    d_inner: usize,
    n: usize,
    d_conv: usize,
    d_out: usize,
    w: &SelectiveWeights,
    zoh: bool,
) -> Vec<f64> {
    // input projection
    let mut xt = vec![0.0; t * d_inner];
    for i in 0..t {
        for j in 0..d_inner {
            let mut s = 0.0;
            for l in 0..d_in {
                s += x[i * d_in + l] * w.w_in[l * d_inner + j];
            }
            xt[i * d_inner + j] = s;
        }
    }
    // depthwise conv, same padding
    let r = d_conv / 2;
    let mut xc = vec![0.0; t * d_inner];
    for i in 0..t {
        for j in 0..d_inner {
            let mut s = w.conv_b[j];
            for k in 0..d_conv {
                let src = i as isize + k as isize - r as isize;
                if src >= 0 && (src as usize) < t {
                    s += xt[src as usize * d_inner + j] * w.conv_k[k * d_inner + j];
                }
            }
            xc[i * d_inner + j] = s;
        }
    }
    // token-wise b, c, delta
    let mut bmat = vec![0.0; t * n];
    let mut cmat = vec![0.0; t * n];
    let mut delta = vec![0.0; t];
    for i in 0..t {
        for j in 0..n {
            let mut sb = 0.0;
            let mut sc = 0.0;
            for l in 0..d_inner {
                sb += xc[i * d_inner + l] * w.w_b[l * n + j];
                sc += xc[i * d_inner + l] * w.w_c[l * n + j];
            }
            bmat[i * n + j] = sb;
            cmat[i * n + j] = sc;
        }
        let mut sd = w.b_dt[0];
        for l in 0..d_inner {
            sd += xc[i * d_inner + l] * w.w_dt[l];
        }
        delta[i] = softplus(sd);
    }
    // recurrence, one state vector per inner channel
    let mut y = vec![0.0; t * d_inner];
    for d in 0..d_inner {
        let mut h = vec![0.0; n];
        for i in 0..t {
            let dt = delta[i];
            let xv = xc[i * d_inner + d];
            let mut acc = 0.0;
            for j in 0..n {
                h[j] = if zoh {
                    (dt * w.a[j]).exp() * h[j] + dt * bmat[i * n + j] * xv
                } else {
                    dt * (w.a[j] * h[j] + bmat[i * n + j] * xv)
                };
                acc += cmat[i * n + j] * h[j];
            }
            y[i * d_inner + d] = acc;
        }
    }
    // output projection
    let mut out = vec![0.0; t * d_out];
    for i in 0..t {
        for j in 0..d_out {
            let mut s = 0.0;
            for l in 0..d_inner {
                s += y[i * d_inner + l] * w.w_out[l * d_out + j];
            }
            out[i * d_out + j] = s;
        }
    }
    out
}

/// Fixed-parameter scan as one materialized linear operator:
/// y[k] = sum_{j<=k} C A^{k-j} B x[j] + D x[k] + C A^{k+1} h0.
#[allow(clippy::too_many_arguments)]
pub fn fixed_scan_matrix_oracle(
    x: &[f64],
    t: usize,
    d_in: usize,
    n: usize,
    d_out: usize,
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    h0: &[f64],
) -> Vec<f64> {
    let matmul = |p: &[f64], q: &[f64], m: usize, k: usize, nn: usize| -> Vec<f64> {
        let mut out = vec![0.0; m * nn];
        for i in 0..m {
            for l in 0..k {
                for j in 0..nn {
                    out[i * nn + j] += p[i * k + l] * q[l * nn + j];
                }
            }
        }
        out
    };
    // powers[e] = A^e, e in 0..=t
    let mut powers: Vec<Vec<f64>> = Vec::with_capacity(t + 1);
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    powers.push(eye);
    for e in 1..=t {
        powers.push(matmul(&powers[e - 1], a, n, n, n));
    }
    let mut y = vec![0.0; t * d_out];
    for k in 0..t {
        // h_k = sum_{j<=k} A^{k-j} B x_j + A^{k+1} h0
        let mut h = vec![0.0; n];
        for j in 0..=k {
            let ap = &powers[k - j];
            for row in 0..n {
                let mut bx = 0.0;
                for col in 0..n {
                    let mut s = 0.0;
                    for l in 0..d_in {
                        s += b[col * d_in + l] * x[j * d_in + l];
                    }
                    bx += ap[row * n + col] * s;
                }
                h[row] += bx;
            }
        }
        let ap = &powers[k + 1];
        for row in 0..n {
            for col in 0..n {
                h[row] += ap[row * n + col] * h0[col];
            }
        }
        for o in 0..d_out {
            let mut s = 0.0;
            for j in 0..n {
                s += c[o * n + j] * h[j];
            }
            for l in 0..d_in {
                s += d[o * d_in + l] * x[k * d_in + l];
            }
            y[k * d_out + o] = s;
        }
    }
    y
}

/// Dense multi-head attention with an optional relative-position bias table
/// and optional window mask. Covers both the local-attention oracle (finite
/// window) and the full-attention case (window >= 2T-1 or None).
#[allow(clippy::too_many_arguments)]
pub fn attention_oracle(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    relbias: Option<(&[f64], usize)>, // ([heads, window] table, window)
    window: Option<usize>,
) -> Vec<f64> {
    let dh = d / heads;
    let scl = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; tq * d];
    for h in 0..heads {
        for i in 0..tq {
            let mut scores = vec![f64::NEG_INFINITY; tk];
            for (j, s) in scores.iter_mut().enumerate() {
                if let Some(w) = window {
                    let r = (w - 1) / 2;
                    let off = j as isize - i as isize;
                    if off.unsigned_abs() > r {
                        continue;
                    }
                }
                let mut acc = 0.0;
                for l in 0..dh {
                    acc += q[i * d + h * dh + l] * k[j * d + h * dh + l];
                }
                let mut sc = acc * scl;
                if let Some((table, w)) = relbias {
                    let r = (w - 1) / 2;
                    let off = j as isize - i as isize + r as isize;
                    sc += table[h * w + off as usize];
                }
                *s = sc;
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let mut wts = vec![0.0; tk];
            for j in 0..tk {
                if scores[j] > f64::NEG_INFINITY {
                    wts[j] = (scores[j] - mx).exp();
                    z += wts[j];
                }
            }
            for j in 0..tk {
                let wq = wts[j] / z;
                for l in 0..dh {
                    out[i * d + h * dh + l] += wq * v[j * d + h * dh + l];
                }
            }
        }
    }
    out
}

fn project_normalize(x: &[f64], rows: usize, d: usize, w: &[f64], pdim: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * pdim];
    for i in 0..rows {
        for j in 0..pdim {
            let mut s = 0.0;
            for l in 0..d {
                s += x[i * d + l] * w[l * pdim + j];
            }
            out[i * pdim + j] = s;
        }
        let norm: f64 =
            out[i * pdim..(i + 1) * pdim].iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = norm.max(eps);
        for j in 0..pdim {
            out[i * pdim + j] /= s;
        }
    }
    out
}

fn lse(vals: &[f64]) -> f64 {
    let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + vals.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Anchor-window contrast, brute force. For each anchor i: positives are its
/// window's tokens, negatives the provided anchor indices. Embeddings pass a
/// shared projection then unit normalization; similarities are cosines / tau.
/// Returns the mean over anchors of -log(sum_P e^s / sum_{P u N} e^s).
#[allow(clippy::too_many_arguments)]
pub fn acc_loss_oracle(
    anchors: &[f64],
    m: usize,
    tokens: &[f64],
    l: usize,
    d: usize,
    stride: usize,
    proj: &[f64],
    pdim: usize,
    tau: f64,
    eps: f64,
    negatives: &[Vec<usize>],
) -> f64 {
    let an = project_normalize(anchors, m, d, proj, pdim, eps);
    let tn = project_normalize(tokens, l, d, proj, pdim, eps);
    let mut total = 0.0;
    for i in 0..m {
        let lo = i * stride;
        let hi = ((i + 1) * stride).min(l);
        let mut pos = Vec::new();
        for t in lo..hi {
            let mut s = 0.0;
            for j in 0..pdim {
                s += an[i * pdim + j] * tn[t * pdim + j];
            }
            pos.push(s / tau);
        }
        let mut all = pos.clone();
        for &nidx in &negatives[i] {
            let mut s = 0.0;
            for j in 0..pdim {
                s += an[i * pdim + j] * an[nidx * pdim + j];
            }
            all.push(s / tau);
        }
        total += lse(&all) - lse(&pos);
    }
    total / m as f64
}

/// Segment prototype contrast, brute force. The query is the re-normalized
/// mean of projected+normalized in-segment tokens; positives are in-segment
/// tokens, negatives all others. Returns the single-segment loss, or None
/// when the segment covers no token.
#[allow(clippy::too_many_arguments)]
pub fn spc_loss_oracle(
    tokens: &[f64],
    l: usize,
    d: usize,
    in_segment: &[usize],
    proj: &[f64],
    pdim: usize,
    tau: f64,
    eps: f64,
) -> Option<f64> {
    if in_segment.is_empty() {
        return None;
    }
    let tn = project_normalize(tokens, l, d, proj, pdim, eps);
    let mut z = vec![0.0; pdim];
    for &t in in_segment {
        for j in 0..pdim {
            z[j] += tn[t * pdim + j];
        }
    }
    for v in z.iter_mut() {
        *v /= in_segment.len() as f64;
    }
    let norm: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = norm.max(eps);
    for v in z.iter_mut() {
        *v /= s;
    }
    let sim = |t: usize| -> f64 {
        let mut s = 0.0;
        for j in 0..pdim {
            s += z[j] * tn[t * pdim + j];
        }
        s / tau
    };
    let pos: Vec<f64> = in_segment.iter().map(|&t| sim(t)).collect();
    let all: Vec<f64> = (0..l).map(sim).collect();
    Some(lse(&all) - lse(&pos))
}

/// Unpooled variant: every in-segment token is its own query against
/// in-segment positives and out-of-segment negatives; mean over queries.
#[allow(clippy::too_many_arguments)]
pub fn spc_unpooled_oracle(
    tokens: &[f64],
    l: usize,
    d: usize,
    in_segment: &[usize],
    proj: &[f64],
    pdim: usize,
    tau: f64,
    eps: f64,
) -> Option<f64> {
    if in_segment.is_empty() {
        return None;
    }
    let tn = project_normalize(tokens, l, d, proj, pdim, eps);
    let mut total = 0.0;
    for &q in in_segment {
        let sim = |t: usize| -> f64 {
            let mut s = 0.0;
            for j in 0..pdim {
                s += tn[q * pdim + j] * tn[t * pdim + j];
            }
            s / tau
        };
        let pos: Vec<f64> = in_segment.iter().map(|&t| sim(t)).collect();
        let all: Vec<f64> = (0..l).map(sim).collect();
        total += lse(&all) - lse(&pos);
    }
    Some(total / in_segment.len() as f64)
}

/// Scalar focal loss, mean over entries.
pub fn focal_loss_oracle(p: &[f64], labels: &[f64], alpha: f64, gamma: f64) -> f64 {
    let mut s = 0.0;
    for (i, &pv) in p.iter().enumerate() {
        if labels[i] > 0.5 {
            s -= alpha * (1.0 - pv).powf(gamma) * pv.ln();
        } else {
            s -= (1.0 - alpha) * pv.powf(gamma) * (1.0 - pv).ln();
        }
    }
    s / p.len() as f64
}
