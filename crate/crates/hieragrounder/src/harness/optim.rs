//! AdamW with global-norm gradient clipping and linear warmup.
//!
//! Weight decay is decoupled (applied to the weights directly, not mixed
//! into the moment estimates). Parameters that received no gradient this
//! step are treated as zero-gradient: their moments decay and weight decay
//! still applies.

use std::collections::HashMap;

use crate::error::Result;
use crate::harness::config::TrainConfig;
use crate::nn::Parameter;

const ADAM_EPS: f64 = 1e-8;

pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    clip_norm: f64,
    warmup_steps: usize,
    step_count: usize,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> AdamW {
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            warmup_steps: cfg.warmup_steps,
            step_count: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step_count
    }

    /// Learning rate after `step` optimizer steps (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }

    /// Applies one update from the gradients currently stored on `params`,
    /// then clears those gradients. Returns the pre-clip global grad norm.
    pub fn step(&mut self, params: &[Parameter]) -> Result<f64> {
        self.step_count += 1;
        let lr = self.lr_at(self.step_count);

        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|p| p.t.grad().unwrap_or_else(|| vec![0.0; p.t.numel()]))
            .collect();
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };

        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (p, grad) in params.iter().zip(&grads) {
            let n = p.t.numel();
            let m = self.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut data = p.t.to_vec();
            for i in 0..n {
                let g = grad[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + self.weight_decay * data[i]);
            }
            p.t.set_data(&data);
            p.t.zero_grad();
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::tensor::Tensor;

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            warmup_steps: 10,
            weight_decay: 0.0,
            clip_norm: 1.0,
            ..TrainConfig::default()
        }
    }

    fn bowl_params() -> Vec<Parameter> {
        vec![Parameter {
            name: "theta".into(),
            t: Tensor::param_from_vec(vec![5.0, -4.0], &[1, 2]).unwrap(),
        }]
    }

    #[test]
    fn converges_on_a_quadratic_bowl() {
        let params = bowl_params();
        let target = Tensor::from_vec(vec![3.0, -1.0], &[1, 2]).unwrap();
        let mut opt = AdamW::new(&quick_cfg());
        for _ in 0..400 {
            let diff = ops::sub(&params[0].t, &target).unwrap();
            let loss = ops::mean_all(&ops::mul(&diff, &diff).unwrap()).unwrap();
            loss.backward().unwrap();
            opt.step(&params).unwrap();
        }
        let got = params[0].t.to_vec();
        assert!((got[0] - 3.0).abs() < 1e-2 && (got[1] + 1.0).abs() < 1e-2, "{got:?}");
    }

    #[test]
    fn warmup_ramps_linearly() {
        let opt = AdamW::new(&quick_cfg());
        assert!((opt.lr_at(1) - 0.005).abs() < 1e-15);
        assert!((opt.lr_at(5) - 0.025).abs() < 1e-15);
        assert!((opt.lr_at(10) - 0.05).abs() < 1e-15);
        assert!((opt.lr_at(500) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn oversized_gradients_are_clipped_to_the_same_update() {
        // any gradient above the clip norm lands on the same clipped vector,
        // so the resulting update must be identical
        let run = |g: f64| {
            let params = bowl_params();
            let mut opt = AdamW::new(&quick_cfg());
            let scale = Tensor::from_vec(vec![g, 0.0], &[1, 2]).unwrap();
            let loss = ops::mean_all(&ops::mul(&params[0].t, &scale).unwrap()).unwrap();
            loss.backward().unwrap();
            let norm = opt.step(&params).unwrap();
            (norm, params[0].t.to_vec())
        };
        let (n1, u1) = run(100.0);
        let (n2, u2) = run(1e7);
        assert!((n1 - 50.0).abs() < 1e-9, "pre-clip norm is reported: {n1}");
        assert!(n2 > 1e6);
        assert_eq!(u1, u2, "clipped updates must match");
        let (_, u3) = run(1e-6);
        assert_ne!(u1[0].to_bits(), u3[0].to_bits(), "tiny gradients are not clipped");
    }

    #[test]
    fn gradients_are_cleared_after_a_step() {
        let params = bowl_params();
        let mut opt = AdamW::new(&quick_cfg());
        let loss = ops::mean_all(&ops::mul(&params[0].t, &params[0].t).unwrap()).unwrap();
        loss.backward().unwrap();
        assert!(params[0].t.grad().is_some());
        opt.step(&params).unwrap();
        assert!(params[0].t.grad().is_none() || params[0].t.grad().unwrap().iter().all(|&g| g == 0.0));
    }
}
