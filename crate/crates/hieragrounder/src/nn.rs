//! Named parameters and small layer building blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// A named trainable tensor. Names are dotted paths ("amp.0.gate.weight")
/// and must be unique within a model; the checkpoint format keys on them.
#[derive(Clone)]
pub struct Parameter {
    pub name: String,
    pub t: Tensor,
}

/// Asserts name uniqueness; call after collecting a full model.
pub fn check_unique_names(params: &[Parameter]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for p in params {
        if !seen.insert(p.name.as_str()) {
            return Err(Error::Config(format!("duplicate parameter name: {}", p.name)));
        }
    }
    Ok(())
}

pub fn total_param_count(params: &[Parameter]) -> usize {
    params.iter().map(|p| p.t.numel()).sum()
}

/// Uniform init in +-1/sqrt(fan_in); the convnet default.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng).requires_grad()
}

pub fn init_zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).requires_grad()
}

pub fn init_ones(shape: &[usize]) -> Tensor {
    Tensor::ones(shape).requires_grad()
}

// ── Linear ──────────────────────────────────────────────────────────────

pub struct Linear {
    pub w: Tensor, // [din, dout]
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new(din: usize, dout: usize, bias: bool, rng: &mut impl Rng) -> Linear {
        Linear {
            w: init_uniform(&[din, dout], din, rng),
            b: if bias { Some(init_zeros(&[dout])) } else { None },
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::matmul(x, &self.w)?;
        match &self.b {
            Some(b) => ops::add_bias(&y, b),
            None => Ok(y),
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Parameter>) {
        out.push(Parameter { name: format!("{prefix}.weight"), t: self.w.clone() });
        if let Some(b) = &self.b {
            out.push(Parameter { name: format!("{prefix}.bias"), t: b.clone() });
        }
    }
}

// ── RmsNorm ─────────────────────────────────────────────────────────────

pub struct RmsNorm {
    pub gain: Tensor,
    pub eps: f64,
}

impl RmsNorm {
    pub fn new(dim: usize) -> RmsNorm {
        RmsNorm { gain: init_ones(&[dim]), eps: 1e-6 }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::rms_norm(x, &self.gain, self.eps)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Parameter>) {
        out.push(Parameter { name: format!("{prefix}.gain"), t: self.gain.clone() });
    }
}

// ── Conv1d layer ────────────────────────────────────────────────────────

pub struct Conv1dLayer {
    pub kernel: Tensor, // [K, Din, Dout]
    pub bias: Tensor,   // [Dout]
}

impl Conv1dLayer {
    pub fn new(k: usize, din: usize, dout: usize, rng: &mut impl Rng) -> Conv1dLayer {
        Conv1dLayer {
            kernel: init_uniform(&[k, din, dout], k * din, rng),
            bias: init_zeros(&[dout]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv1d(x, &self.kernel, Some(&self.bias))
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Parameter>) {
        out.push(Parameter { name: format!("{prefix}.kernel"), t: self.kernel.clone() });
        out.push(Parameter { name: format!("{prefix}.bias"), t: self.bias.clone() });
    }
}

// ── feed-forward ────────────────────────────────────────────────────────

/// Two-layer MLP with silu, applied row-wise.
pub struct Ffn {
    pub w1: Linear,
    pub w2: Linear,
}

impl Ffn {
    pub fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Ffn {
        Ffn { w1: Linear::new(dim, hidden, true, rng), w2: Linear::new(hidden, dim, true, rng) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = ops::silu(&self.w1.forward(x)?)?;
        self.w2.forward(&h)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Parameter>) {
        self.w1.params(&format!("{prefix}.w1"), out);
        self.w2.params(&format!("{prefix}.w2"), out);
    }
}
