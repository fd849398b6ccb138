//! Scaling benchmark: analytic FLOPs of the pyramid encoder against a
//! matched full-self-attention baseline, plus measured wall time per
//! sequence length, with power-law fits of both. Everything runs on one
//! thread so timings are stable.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amp::{attention_block_flops, block_flops, AmpBlock, AmpConfig, Pooling};
use crate::error::{Error, Result};
use crate::harness::config::BenchConfig;
use crate::no_grad;
use crate::tensor::Tensor;

impl BenchConfig {
    fn amp_config(&self) -> AmpConfig {
        AmpConfig {
            dim: self.dim,
            stride: self.stride,
            pooling: Pooling::Mean,
            d_state: self.d_state,
            d_conv: self.d_conv,
            expand: self.expand,
            zoh: false,
            window: self.window,
            heads: self.heads,
            ffn_expansion: 2,
            gate_bias: 0.0,
            interleave: self.interleave,
            bidirectional: true,
            local_attention: true,
            gates: true,
        }
    }
}

/// Total analytic multiplies of a `layers`-deep pyramid over `l0` tokens.
pub fn encoder_flops(bc: &BenchConfig, l0: usize) -> u64 {
    let cfg = bc.amp_config();
    let mut total = 0u64;
    let mut t = l0;
    for _ in 0..bc.layers {
        total += block_flops(&cfg, t);
        t = t.div_ceil(bc.stride);
    }
    total
}

/// The same pyramid with every scan replaced by full self-attention.
pub fn attention_flops(bc: &BenchConfig, l0: usize) -> u64 {
    let cfg = bc.amp_config();
    let mut total = 0u64;
    let mut t = l0;
    for _ in 0..bc.layers {
        total += attention_block_flops(&cfg, t);
        t = t.div_ceil(bc.stride);
    }
    total
}

/// Least-squares fit of y = a * x^b in log-log space; returns (ln a, b).
pub fn power_law_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config("power-law fit needs >= 2 matched points".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::Numeric("power-law fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let b = cov / var;
    Ok((my - b * mx, b))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BenchPoint {
    pub length: usize,
    pub encoder_flops: u64,
    pub attention_flops: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub points: Vec<BenchPoint>,
    /// Fitted wall-time exponent of the encoder forward.
    pub time_exponent: f64,
    pub encoder_flop_exponent: f64,
    pub attention_flop_exponent: f64,
    /// Analytic baseline-over-encoder FLOP ratio at the largest length,
    /// the desk-scale echo of the headline efficiency claim.
    pub flop_ratio_at_max: f64,
}

/// Times the pyramid forward per length (median of `repeats`, after one
/// warmup) and fits the curves.
pub fn run_bench(bc: &BenchConfig) -> Result<BenchReport> {
    bc.validate()?;
    let cfg = bc.amp_config();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let blocks: Vec<AmpBlock> = (0..bc.layers)
        .map(|_| AmpBlock::new(cfg, &mut rng))
        .collect::<Result<_>>()?;

    let mut points = Vec::with_capacity(bc.lengths.len());
    for &l in &bc.lengths {
        let x = Tensor::randn(&[l, bc.dim], &mut rng);
        let forward = |input: &Tensor| -> Result<()> {
            no_grad(|| {
                let mut h = input.clone();
                for b in &blocks {
                    let out = b.forward(&h)?;
                    h = out.next_anchors;
                }
                Ok(())
            })
        };
        forward(&x)?; // warmup
        let mut times = Vec::with_capacity(bc.repeats);
        for _ in 0..bc.repeats {
            let t0 = Instant::now();
            forward(&x)?;
            times.push(t0.elapsed().as_secs_f64());
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        points.push(BenchPoint {
            length: l,
            encoder_flops: encoder_flops(bc, l),
            attention_flops: attention_flops(bc, l),
            seconds: times[times.len() / 2],
        });
    }

    let ls: Vec<f64> = points.iter().map(|p| p.length as f64).collect();
    let (_, time_exponent) =
        power_law_fit(&ls, &points.iter().map(|p| p.seconds).collect::<Vec<_>>())?;
    let (_, encoder_flop_exponent) =
        power_law_fit(&ls, &points.iter().map(|p| p.encoder_flops as f64).collect::<Vec<_>>())?;
    let (_, attention_flop_exponent) =
        power_law_fit(&ls, &points.iter().map(|p| p.attention_flops as f64).collect::<Vec<_>>())?;
    let last = points.last().expect("validated non-empty");
    Ok(BenchReport {
        time_exponent,
        encoder_flop_exponent,
        attention_flop_exponent,
        flop_ratio_at_max: last.attention_flops as f64 / last.encoder_flops as f64,
        points,
    })
}

/// One JSON line per measured length, then one summary line.
pub fn write_report(w: &mut impl Write, report: &BenchReport) -> Result<()> {
    for p in &report.points {
        let line =
            serde_json::to_string(p).map_err(|e| Error::Format(format!("bench point: {e}")))?;
        writeln!(w, "{line}")?;
    }
    let summary = serde_json::json!({
        "time_exponent": report.time_exponent,
        "encoder_flop_exponent": report.encoder_flop_exponent,
        "attention_flop_exponent": report.attention_flop_exponent,
        "flop_ratio_at_max": report.flop_ratio_at_max,
    });
    writeln!(w, "{summary}")?;
    Ok(())
}
