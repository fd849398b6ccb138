//! Finite-difference gradient verification.
//!
//! Compares analytic gradients (one backward pass) against central
//! differences of the loss closure. Parameters with more than 64 entries are
//! spot-checked on a fixed-seed random subset so whole-model checks stay
//! inside a desk-scale time budget.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Parameter;
use crate::tensor::{no_grad, Tensor};

const MAX_ENTRIES_PER_PARAM: usize = 64;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub entries: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| !e.pass).collect()
    }

    /// One line per parameter, worst offender first among failures.
    pub fn format_table(&self) -> String {
        let mut s = format!("gradient check: eps {:.1e}, tol {:.1e}\n", self.eps, self.tol);
        for e in &self.entries {
            s.push_str(&format!(
                "  {:<40} entries {:>6} checked {:>3} max_rel_err {:.3e} {}\n",
                e.name,
                e.entries,
                e.checked,
                e.max_rel_err,
                if e.pass { "ok" } else { "FAIL" }
            ));
        }
        s.push_str(&format!(
            "result: {} ({} of {} parameters ok)\n",
            if self.pass() { "PASS" } else { "FAIL" },
            self.entries.iter().filter(|e| e.pass).count(),
            self.entries.len()
        ));
        s
    }
}

/// Relative error with an absolute floor: |a-n| / max(1, |a|, |n|).
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

/// Verifies analytic gradients of `loss_fn` w.r.t. every parameter.
/// The closure must be deterministic and reentrant (it is re-evaluated
/// twice per checked entry at perturbed parameter values).
pub fn grad_check(
    loss_fn: impl Fn() -> Result<Tensor>,
    params: &[Parameter],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    grad_check_impl(loss_fn, params, eps, tol, None)
}

/// Test fixture: scales the analytic gradient of the named parameter,
/// simulating a broken backward rule, to prove the checker reports it.
#[doc(hidden)]
pub fn grad_check_tampered(
    loss_fn: impl Fn() -> Result<Tensor>,
    params: &[Parameter],
    eps: f64,
    tol: f64,
    tamper_name: &str,
    tamper_factor: f64,
) -> Result<GradCheckReport> {
    grad_check_impl(loss_fn, params, eps, tol, Some((tamper_name, tamper_factor)))
}

fn grad_check_impl(
    loss_fn: impl Fn() -> Result<Tensor>,
    params: &[Parameter],
    eps: f64,
    tol: f64,
    tamper: Option<(&str, f64)>,
) -> Result<GradCheckReport> {
    if eps <= 0.0 || tol <= 0.0 {
        return Err(Error::Config(format!(
            "grad_check: eps ({eps}) and tol ({tol}) must be positive"
        )));
    }
    for p in params {
        p.t.zero_grad();
    }
    let loss = loss_fn()?;
    let base = loss.item()?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!(
            "grad_check: loss is non-finite ({base}) at the base point"
        )));
    }
    loss.backward()?;

    let mut entries = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let n = p.t.numel();
        let analytic = p.t.grad().unwrap_or_else(|| vec![0.0; n]);
        let factor = match tamper {
            Some((name, f)) if name == p.name => f,
            _ => 1.0,
        };
        let sample: Vec<usize> = if n <= MAX_ENTRIES_PER_PARAM {
            (0..n).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0x6ead_c43c ^ pi as u64);
            let mut idx =
                rand::seq::index::sample(&mut rng, n, MAX_ENTRIES_PER_PARAM).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut worst = GradCheckEntry {
            name: p.name.clone(),
            entries: n,
            checked: sample.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            pass: true,
        };
        for &idx in &sample {
            let orig = p.t.get_elem(idx);
            p.t.set_elem(idx, orig + eps);
            let lp = no_grad(|| loss_fn().and_then(|l| l.item()));
            p.t.set_elem(idx, orig - eps);
            let lm = no_grad(|| loss_fn().and_then(|l| l.item()));
            p.t.set_elem(idx, orig);
            let (lp, lm) = (lp?, lm?);
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check: non-finite loss while perturbing {}[{idx}]",
                    p.name
                )));
            }
            let numeric = (lp - lm) / (2.0 * eps);
            let re = rel_err(analytic[idx] * factor, numeric);
            if re > worst.max_rel_err {
                worst.max_rel_err = re;
                worst.worst_index = idx;
                worst.analytic_at_worst = analytic[idx] * factor;
                worst.numeric_at_worst = numeric;
            }
        }
        worst.pass = worst.max_rel_err < tol;
        entries.push(worst);
    }
    Ok(GradCheckReport { eps, tol, entries })
}
