//! State-space sequence layers.
//!
//! Two flavors live here. `FixedSsm` is the classical linear recurrence with
//! dense constant matrices, kept as a baseline and a correctness anchor: it
//! equals a materialized T*T linear operator, which tests exploit. The
//! workhorse is `SelectiveLayer`, whose transition step, input and readout
//! maps are functions of the current token, computed in one pass over the
//! sequence. `BidiScan` runs two selective layers in opposite directions and
//! adds a diagonal residual, so each output position can depend on the whole
//! sequence while staying linear in its length.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_uniform, init_zeros, Linear, Parameter};
use crate::ops;
use crate::tensor::Tensor;

// ── fixed-parameter scan ────────────────────────────────────────────────

/// h_{k} = A h_{k-1} + B x_k, y_k = C h_k + D x_k with constant matrices.
pub struct FixedSsm {
    pub a: Tensor, // [n, n]
    pub b: Tensor, // [n, d_in]
    pub c: Tensor, // [d_out, n]
    pub d: Tensor, // [d_out, d_in]
}

impl FixedSsm {
    /// Random init with the transition rescaled to spectral norm 0.9. The
    /// norm bounds the spectral radius from above, so iterating the
    /// recurrence cannot blow up regardless of length.
    pub fn new(n: usize, d_in: usize, d_out: usize, rng: &mut impl Rng) -> FixedSsm {
        let mut a = Tensor::randn(&[n, n], rng);
        let sigma = spectral_norm(&a.to_vec(), n, 200);
        if sigma > 1e-12 {
            let scaled: Vec<f64> = a.to_vec().iter().map(|v| v * 0.9 / sigma).collect();
            a = Tensor::from_vec(scaled, &[n, n]).unwrap();
        }
        FixedSsm {
            a: a.requires_grad(),
            b: init_uniform(&[n, d_in], d_in, rng),
            c: init_uniform(&[d_out, n], n, rng),
            d: init_uniform(&[d_out, d_in], d_in, rng),
        }
    }

    pub fn forward(&self, x: &Tensor, h0: &Tensor) -> Result<Tensor> {
        ops::fixed_scan(x, &self.a, &self.b, &self.c, &self.d, h0)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Parameter>) {
        for (suffix, t) in [("a", &self.a), ("b", &self.b), ("c", &self.c), ("d", &self.d)] {
            out.push(Parameter { name: format!("{prefix}.{suffix}"), t: t.clone() });
        }
    }
}

/// Largest |eigenvalue| estimate for a dense [n, n] matrix: geometric mean
/// of the norm growth over the tail of a power iteration. The mean is what
/// makes complex dominant pairs work, where the single-step ratio only
/// oscillates around the radius.
pub fn spectral_radius(a: &[f64], n: usize, iters: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    // fixed start vector; good enough for a guard, not a general eigensolver
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64) * 0.37).collect();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= nv;
    }
    let burn = iters / 2;
    let mut log_growth = 0.0;
    for it in 0..iters {
        let mut w = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                w[i] += a[i * n + j] * v[j];
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return 0.0;
        }
        if it >= burn {
            log_growth += norm.ln();
        }
        for x in w.iter_mut() {
            *x /= norm;
        }
        v = w;
    }
    (log_growth / (iters - burn) as f64).exp()
}

/// Largest singular value via power iteration on the gram matrix, which is
/// symmetric so the iteration converges without oscillation.
fn spectral_norm(a: &[f64], n: usize, iters: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..n {
                s += a[l * n + i] * a[l * n + j];
            }
            g[i * n + j] = s;
        }
    }
    spectral_radius(&g, n, iters).sqrt()
}

// ── selective scan ──────────────────────────────────────────────────────

/// Dimensions of one selective scan layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub d_in: usize,
    pub d_out: usize,
    /// State size per inner channel.
    pub d_state: usize,
    /// Depthwise conv width before the projections; odd.
    pub d_conv: usize,
    /// Inner channel count is expand * d_in.
    pub expand: usize,
    /// Discretize with zero-order hold (exp(delta*A) decay) instead of
    /// multiplying the whole step by delta.
    pub zoh: bool,
}

impl ScanConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_in
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.d_state == 0 || self.expand == 0 {
            return Err(Error::Config(format!("scan dims must be positive: {self:?}")));
        }
        if self.d_conv % 2 == 0 || self.d_conv == 0 {
            return Err(Error::Config(format!(
                "scan conv width must be odd and positive, got {}",
                self.d_conv
            )));
        }
        Ok(())
    }
}

/// One direction of the selective scan.
///
/// Pipeline per forward: input projection (no bias) -> depthwise conv with
/// bias -> token-wise B, C (no bias) and softplus step size (with bias) ->
/// diagonal-transition recurrence -> output projection (no bias). There is
/// deliberately no pointwise activation after the conv; with the conv bias
/// at zero this keeps all-zero input an exact fixed point, which the anchor
/// pyramid's padding logic relies on.
pub struct SelectiveLayer {
    pub cfg: ScanConfig,
    pub in_proj: Linear,   // [d_in, d_inner], no bias
    pub conv_k: Tensor,    // [d_conv, d_inner]
    pub conv_b: Tensor,    // [d_inner]
    pub b_proj: Linear,    // [d_inner, n], no bias
    pub c_proj: Linear,    // [d_inner, n], no bias
    pub dt_proj: Linear,   // [d_inner, 1], bias
    pub a_diag: Tensor,    // [n], negative
}

impl SelectiveLayer {
    pub fn new(cfg: ScanConfig, rng: &mut impl Rng) -> Result<SelectiveLayer> {
        cfg.validate()?;
        let dc = cfg.d_inner();
        let n = cfg.d_state;
        // negative diagonal transition, magnitudes log-uniform in [0.01, 1]
        let a: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.gen_range(0.0..1.0);
                let lo = 0.01f64.ln();
                -(lo + u * (0.0 - lo)).exp()
            })
            .collect();
        Ok(SelectiveLayer {
            cfg,
            in_proj: Linear::new(cfg.d_in, dc, false, rng),
            conv_k: init_uniform(&[cfg.d_conv, dc], cfg.d_conv, rng),
            conv_b: init_zeros(&[dc]),
            b_proj: Linear::new(dc, n, false, rng),
            c_proj: Linear::new(dc, n, false, rng),
            dt_proj: Linear::new(dc, 1, true, rng),
            a_diag: Tensor::from_vec(a, &[n])?.requires_grad(),
        })
    }

    /// Separate from `new` so tests can build layers around fixed weights.
    pub fn out_proj(cfg: ScanConfig, rng: &mut impl Rng) -> Linear {
        Linear::new(cfg.d_inner(), cfg.d_out, false, rng)
    }

    pub fn forward(&self, x: &Tensor, out_proj: &Linear) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.cfg.d_in {
            return Err(Error::Shape(format!(
                "selective scan expects [T, {}], got {:?}",
                self.cfg.d_in,
                x.shape()
            )));
        }
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("selective scan: non-finite input".into()));
        }
        let t = x.rows();
        if t == 0 {
            return Ok(Tensor::zeros(&[0, self.cfg.d_out]));
        }
        let xt = self.in_proj.forward(x)?;
        let xc = ops::depthwise_conv1d(&xt, &self.conv_k, Some(&self.conv_b))?;
        let b = self.b_proj.forward(&xc)?;
        let c = self.c_proj.forward(&xc)?;
        let dt = ops::softplus(&self.dt_proj.forward(&xc)?)?;
        let y = ops::selective_scan_core(&xc, &b, &c, &dt, &self.a_diag, self.cfg.zoh)?;
        out_proj.forward(&y)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Parameter>) {
        self.in_proj.params(&format!("{prefix}.in_proj"), out);
        out.push(Parameter { name: format!("{prefix}.conv.kernel"), t: self.conv_k.clone() });
        out.push(Parameter { name: format!("{prefix}.conv.bias"), t: self.conv_b.clone() });
        self.b_proj.params(&format!("{prefix}.b_proj"), out);
        self.c_proj.params(&format!("{prefix}.c_proj"), out);
        self.dt_proj.params(&format!("{prefix}.dt_proj"), out);
        out.push(Parameter { name: format!("{prefix}.a"), t: self.a_diag.clone() });
    }
}

// ── bidirectional wrapper ───────────────────────────────────────────────

/// Forward scan + reversed backward scan + diagonal residual:
///   out = fwd(x) + rev(bwd(rev(x))) + diag (*) x
/// With `bidirectional: false` only the forward branch runs, which the
/// ablations use. Requires d_in == d_out so the branches can sum.
pub struct BidiScan {
    pub fwd: SelectiveLayer,
    pub fwd_out: Linear,
    pub bwd: Option<(SelectiveLayer, Linear)>,
    pub diag: Option<Tensor>, // [d]
}

impl BidiScan {
    pub fn new(cfg: ScanConfig, bidirectional: bool, rng: &mut impl Rng) -> Result<BidiScan> {
        if cfg.d_in != cfg.d_out {
            return Err(Error::Config(format!(
                "bidirectional scan needs d_in == d_out, got {} and {}",
                cfg.d_in, cfg.d_out
            )));
        }
        let fwd = SelectiveLayer::new(cfg, rng)?;
        let fwd_out = SelectiveLayer::out_proj(cfg, rng);
        let (bwd, diag) = if bidirectional {
            let layer = SelectiveLayer::new(cfg, rng)?;
            let proj = SelectiveLayer::out_proj(cfg, rng);
            (Some((layer, proj)), Some(init_uniform(&[cfg.d_in], cfg.d_in, rng)))
        } else {
            (None, None)
        };
        Ok(BidiScan { fwd, fwd_out, bwd, diag })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = self.fwd.forward(x, &self.fwd_out)?;
        if let Some((bwd, proj)) = &self.bwd {
            let rx = ops::reverse_rows(x)?;
            let ry = bwd.forward(&rx, proj)?;
            out = ops::add(&out, &ops::reverse_rows(&ry)?)?;
        }
        if let Some(diag) = &self.diag {
            out = ops::add(&out, &ops::mul_rowvec(x, diag)?)?;
        }
        Ok(out)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Parameter>) {
        self.fwd.params(&format!("{prefix}.fwd"), out);
        self.fwd_out.params(&format!("{prefix}.fwd.out_proj"), out);
        if let Some((bwd, proj)) = &self.bwd {
            bwd.params(&format!("{prefix}.bwd"), out);
            proj.params(&format!("{prefix}.bwd.out_proj"), out);
        }
        if let Some(diag) = &self.diag {
            out.push(Parameter { name: format!("{prefix}.diag"), t: diag.clone() });
        }
    }
}

// ── cost model ──────────────────────────────────────────────────────────

/// Analytic multiply-add count of one selective scan forward over T tokens.
/// Per token, with d_inner = expand * d_in and n = d_state:
///   d_in * d_inner          input projection
/// + d_conv * d_inner        depthwise conv
/// + d_inner * (2n + 1)      token-wise B, C and step-size projections
/// + 4 * d_inner * n         recurrence (decay, inject, scale, readout)
/// + d_inner * d_out         output projection
pub fn selective_scan_flops(t: usize, cfg: &ScanConfig) -> u64 {
    let dc = cfg.d_inner() as u64;
    let n = cfg.d_state as u64;
    let per_token = cfg.d_in as u64 * dc
        + cfg.d_conv as u64 * dc
        + dc * (2 * n + 1)
        + 4 * dc * n
        + dc * cfg.d_out as u64;
    t as u64 * per_token
}

/// Bidirectional cost: two scans plus the diagonal residual.
pub fn bidi_scan_flops(t: usize, cfg: &ScanConfig) -> u64 {
    2 * selective_scan_flops(t, cfg) + (t * cfg.d_in) as u64
}
