//! Training objectives.
//!
//! Two contrastive terms shape the encoder: an anchor-window contrast that
//! pulls each pooled anchor toward the tokens it summarizes and pushes it
//! from distant anchors, and a segment prototype contrast that pulls tokens
//! inside the annotated moment toward their pooled prototype. Both operate
//! on unit-normalized linear projections of the features, so they see only
//! directions. Detection training adds focal classification and a 1-D
//! distance-IoU regression; `total_loss` combines all four.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::ops;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    /// Softmax temperature for both contrastive terms.
    pub tau: f64,
    /// Anchors within this index distance are never negatives.
    pub margin: usize,
    /// Negatives are capped at neg_cap * |positives| per anchor.
    pub neg_cap: f64,
    /// Projection head output width.
    pub proj_dim: usize,
    pub lambda_acc: f64,
    pub lambda_spc: f64,
    /// One projection head for all pyramid layers instead of one per layer.
    pub shared_head: bool,
    /// Ablation: per-token segment contrast instead of the pooled prototype.
    pub unpooled_spc: bool,
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.tau)));
        }
        if self.margin == 0 {
            return Err(Error::Config("negative margin must be >= 1".into()));
        }
        if !(self.neg_cap > 0.0) {
            return Err(Error::Config(format!("negative cap must be > 0, got {}", self.neg_cap)));
        }
        if self.proj_dim == 0 {
            return Err(Error::Config("projection dim must be positive".into()));
        }
        Ok(())
    }
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.07,
            margin: 2,
            neg_cap: 4.0,
            proj_dim: 8,
            lambda_acc: 10.0,
            lambda_spc: 1.0,
            shared_head: false,
            unpooled_spc: false,
        }
    }
}

/// Deterministic negative selection for anchor i: anchor indices j with
/// |i - j| > margin, subsampled to `cap` with a seed-derived draw when there
/// are more. Exposed so tests can hand the same sets to the oracle.
pub fn select_negatives(m: usize, i: usize, margin: usize, cap: usize, seed: u64) -> Vec<usize> {
    let candidates: Vec<usize> =
        (0..m).filter(|&j| (j as isize - i as isize).unsigned_abs() > margin).collect();
    if candidates.len() <= cap {
        return candidates;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, candidates.len(), cap)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    picked.sort_unstable();
    picked
}

/// Anchor-window contrast for one layer. Anchors and tokens pass the shared
/// projection and unit normalization; each anchor's positives are its own
/// window's tokens, its negatives a capped sample of distant anchors. The
/// per-anchor term is log-sum-exp over positives-and-negatives minus
/// log-sum-exp over positives; the result is the mean over anchors.
pub fn acc_loss(
    anchors: &Tensor,
    tokens: &Tensor,
    stride: usize,
    cfg: &ContrastiveConfig,
    proj: &Linear,
    seed: u64,
) -> Result<Tensor> {
    cfg.validate()?;
    let m = anchors.rows();
    let l = tokens.rows();
    if stride == 0 {
        return Err(Error::Config("anchor stride must be >= 1".into()));
    }
    if m != l.div_ceil(stride) {
        return Err(Error::Shape(format!(
            "anchor contrast: {l} tokens at stride {stride} need {} anchors, got {m}",
            l.div_ceil(stride)
        )));
    }
    let an = ops::normalize_rows(&proj.forward(anchors)?, NORM_EPS)?;
    let tn = ops::normalize_rows(&proj.forward(tokens)?, NORM_EPS)?;
    // one similarity matrix against [tokens; anchors], scaled by 1/tau
    let bank = ops::concat_rows(&[tn, an.clone()])?;
    let sims = ops::affine(&ops::matmul_nt(&an, &bank)?, 1.0 / cfg.tau, 0.0)?;
    let mut pos_masks = Vec::with_capacity(m);
    let mut all_masks = Vec::with_capacity(m);
    for i in 0..m {
        let pos: Vec<usize> = (i * stride..((i + 1) * stride).min(l)).collect();
        let cap = ((cfg.neg_cap * pos.len() as f64).floor() as usize).max(1);
        let negs = select_negatives(m, i, cfg.margin, cap, seed);
        let mut all = pos.clone();
        all.extend(negs.iter().map(|&j| l + j));
        pos_masks.push(pos);
        all_masks.push(all);
    }
    let lse_all = ops::masked_logsumexp(&sims, &all_masks)?;
    let lse_pos = ops::masked_logsumexp(&sims, &pos_masks)?;
    ops::mean_all(&ops::sub(&lse_all, &lse_pos)?)
}

/// Segment prototype contrast for one layer. Tokens inside the segment are
/// pooled (after projection and normalization) into a re-normalized
/// prototype; the loss contrasts the prototype's similarity to in-segment
/// tokens against all tokens of the level. Returns None when the segment
/// covers no token at this level, which coarse levels legitimately hit.
pub fn spc_loss(
    tokens: &Tensor,
    in_segment: &[usize],
    cfg: &ContrastiveConfig,
    proj: &Linear,
) -> Result<Option<Tensor>> {
    cfg.validate()?;
    if in_segment.is_empty() {
        return Ok(None);
    }
    let l = tokens.rows();
    for &t in in_segment {
        if t >= l {
            return Err(Error::Shape(format!(
                "segment contrast: token {t} out of range for {l} tokens"
            )));
        }
    }
    let tn = ops::normalize_rows(&proj.forward(tokens)?, NORM_EPS)?;
    let pooled = ops::mean_rows(&ops::select_rows(&tn, in_segment)?)?;
    let z = ops::normalize_rows(&pooled, NORM_EPS)?;
    let sims = ops::affine(&ops::matmul_nt(&z, &tn)?, 1.0 / cfg.tau, 0.0)?;
    let lse_all = ops::masked_logsumexp(&sims, &[(0..l).collect()])?;
    let lse_pos = ops::masked_logsumexp(&sims, &[in_segment.to_vec()])?;
    Ok(Some(ops::mean_all(&ops::sub(&lse_all, &lse_pos)?)?))
}

/// Ablation variant: every in-segment token is its own query against the
/// same positive and negative sets; mean over in-segment tokens.
pub fn spc_loss_unpooled(
    tokens: &Tensor,
    in_segment: &[usize],
    cfg: &ContrastiveConfig,
    proj: &Linear,
) -> Result<Option<Tensor>> {
    cfg.validate()?;
    if in_segment.is_empty() {
        return Ok(None);
    }
    let l = tokens.rows();
    for &t in in_segment {
        if t >= l {
            return Err(Error::Shape(format!(
                "segment contrast: token {t} out of range for {l} tokens"
            )));
        }
    }
    let tn = ops::normalize_rows(&proj.forward(tokens)?, NORM_EPS)?;
    let queries = ops::select_rows(&tn, in_segment)?;
    let sims = ops::affine(&ops::matmul_nt(&queries, &tn)?, 1.0 / cfg.tau, 0.0)?;
    let k = in_segment.len();
    let all_masks: Vec<Vec<usize>> = (0..k).map(|_| (0..l).collect()).collect();
    let pos_masks: Vec<Vec<usize>> = (0..k).map(|_| in_segment.to_vec()).collect();
    let lse_all = ops::masked_logsumexp(&sims, &all_masks)?;
    let lse_pos = ops::masked_logsumexp(&sims, &pos_masks)?;
    Ok(Some(ops::mean_all(&ops::sub(&lse_all, &lse_pos)?)?))
}

/// Mean focal classification loss over one level's token scores.
pub fn focal_loss(p: &Tensor, labels: &[f64], alpha: f64, gamma: f64) -> Result<Tensor> {
    ops::focal_loss(p, labels, alpha, gamma)
}

/// Mean 1-D distance-IoU loss over predicted intervals.
pub fn diou_loss(pred: &Tensor, gt: &[(f64, f64)]) -> Result<Tensor> {
    ops::diou_loss(pred, gt)
}

/// L = cls + reg + lambda_acc * acc + lambda_spc * spc. Rejects non-finite
/// components by name, so a diverging run says which term blew up.
pub fn total_loss(
    cls: &Tensor,
    reg: &Tensor,
    acc: &Tensor,
    spc: &Tensor,
    cfg: &ContrastiveConfig,
) -> Result<Tensor> {
    for (name, t) in [("cls", cls), ("reg", reg), ("acc", acc), ("spc", spc)] {
        if !t.item()?.is_finite() {
            return Err(Error::Numeric(format!("total_loss: non-finite {name} component")));
        }
    }
    let detect = ops::add(cls, reg)?;
    let weighted_acc = ops::affine(acc, cfg.lambda_acc, 0.0)?;
    let weighted_spc = ops::affine(spc, cfg.lambda_spc, 0.0)?;
    ops::add(&ops::add(&detect, &weighted_acc)?, &weighted_spc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn proj_head(d: usize, p: usize, rng: &mut ChaCha8Rng) -> Linear {
        Linear::new(d, p, false, rng)
    }

    fn cfg() -> ContrastiveConfig {
        ContrastiveConfig { proj_dim: 4, ..ContrastiveConfig::default() }
    }

    #[test]
    fn negative_selection_respects_margin_and_cap() {
        for i in 0..10 {
            let negs = select_negatives(10, i, 2, 4, 7);
            assert!(negs.len() <= 4);
            for &j in &negs {
                assert!((j as isize - i as isize).unsigned_abs() > 2);
            }
            // deterministic given the seed
            assert_eq!(negs, select_negatives(10, i, 2, 4, 7));
        }
        // all candidates kept when under the cap
        assert_eq!(select_negatives(5, 0, 2, 10, 1), vec![3, 4]);
    }

    #[test]
    fn single_anchor_without_negatives_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = proj_head(6, 4, &mut rng);
        let tokens = Tensor::randn(&[3, 6], &mut rng);
        let anchors = Tensor::randn(&[1, 6], &mut rng);
        let loss = acc_loss(&anchors, &tokens, 3, &cfg(), &proj, 0).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn acc_is_invariant_to_embedding_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let proj = proj_head(6, 4, &mut rng);
        let tokens = Tensor::randn(&[6, 6], &mut rng);
        let anchors = Tensor::randn(&[3, 6], &mut rng);
        let a = acc_loss(&anchors, &tokens, 2, &cfg(), &proj, 0).unwrap().item().unwrap();
        let scale = |t: &Tensor| {
            Tensor::from_vec(t.to_vec().iter().map(|v| v * 3.7).collect(), t.shape()).unwrap()
        };
        let b = acc_loss(&scale(&anchors), &scale(&tokens), 2, &cfg(), &proj, 0)
            .unwrap()
            .item()
            .unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn acc_matches_brute_force_on_the_worked_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = ContrastiveConfig { margin: 1, ..cfg() };
        let proj = proj_head(5, 4, &mut rng);
        let tokens = Tensor::randn(&[6, 5], &mut rng);
        let anchors = Tensor::randn(&[3, 5], &mut rng);
        let got = acc_loss(&anchors, &tokens, 2, &c, &proj, 11).unwrap().item().unwrap();
        let negatives: Vec<Vec<usize>> = (0..3)
            .map(|i| select_negatives(3, i, c.margin, (c.neg_cap * 2.0) as usize, 11))
            .collect();
        let want = oracles::acc_loss_oracle(
            &anchors.to_vec(),
            3,
            &tokens.to_vec(),
            6,
            5,
            2,
            &proj.w.to_vec(),
            4,
            c.tau,
            NORM_EPS,
            &negatives,
        );
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn acc_matches_brute_force_over_many_seeds() {
        for seed in 0..30u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 3 + (seed as usize % 4);
            let p = 2 + (seed as usize % 3);
            let l = 2 + (seed as usize % 7); // <= 8 tokens
            let s = 1 + (seed as usize % 3);
            let m = l.div_ceil(s);
            let c = ContrastiveConfig {
                margin: 1 + (seed as usize % 2),
                neg_cap: 1.0 + (seed % 3) as f64,
                proj_dim: p,
                ..ContrastiveConfig::default()
            };
            let proj = proj_head(d, p, &mut rng);
            let tokens = Tensor::randn(&[l, d], &mut rng);
            let anchors = Tensor::randn(&[m, d], &mut rng);
            let got = acc_loss(&anchors, &tokens, s, &c, &proj, seed).unwrap().item().unwrap();
            let negatives: Vec<Vec<usize>> = (0..m)
                .map(|i| {
                    let pos_len = ((i + 1) * s).min(l) - i * s;
                    let cap = ((c.neg_cap * pos_len as f64).floor() as usize).max(1);
                    select_negatives(m, i, c.margin, cap, seed)
                })
                .collect();
            let want = oracles::acc_loss_oracle(
                &anchors.to_vec(),
                m,
                &tokens.to_vec(),
                l,
                d,
                s,
                &proj.w.to_vec(),
                p,
                c.tau,
                NORM_EPS,
                &negatives,
            );
            assert!((got - want).abs() < 1e-10, "seed {seed}: {got} vs {want}");
            assert!(got >= 0.0, "seed {seed}: negative loss {got}");
        }
    }

    #[test]
    fn acc_rejects_bad_temperature_and_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let proj = proj_head(4, 2, &mut rng);
        let tokens = Tensor::randn(&[4, 4], &mut rng);
        let anchors = Tensor::randn(&[2, 4], &mut rng);
        let bad = ContrastiveConfig { tau: 0.0, ..cfg() };
        assert!(acc_loss(&anchors, &tokens, 2, &bad, &proj, 0).is_err());
        let err = acc_loss(&anchors, &tokens, 1, &cfg(), &proj, 0).unwrap_err();
        assert!(err.to_string().contains("need 4 anchors"), "{err}");
    }

    #[test]
    fn spc_with_whole_level_segment_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let proj = proj_head(5, 3, &mut rng);
        let tokens = Tensor::randn(&[4, 5], &mut rng);
        let loss = spc_loss(&tokens, &[0, 1, 2, 3], &cfg(), &proj).unwrap().unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
        let loss = spc_loss_unpooled(&tokens, &[0, 1, 2, 3], &cfg(), &proj).unwrap().unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn spc_skips_empty_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let proj = proj_head(5, 3, &mut rng);
        let tokens = Tensor::randn(&[4, 5], &mut rng);
        assert!(spc_loss(&tokens, &[], &cfg(), &proj).unwrap().is_none());
        assert!(spc_loss_unpooled(&tokens, &[], &cfg(), &proj).unwrap().is_none());
        assert!(spc_loss(&tokens, &[9], &cfg(), &proj).is_err());
    }

    #[test]
    fn spc_is_invariant_to_embedding_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let proj = proj_head(5, 3, &mut rng);
        let tokens = Tensor::randn(&[6, 5], &mut rng);
        let seg = [2usize, 3];
        let a = spc_loss(&tokens, &seg, &cfg(), &proj).unwrap().unwrap().item().unwrap();
        let scaled =
            Tensor::from_vec(tokens.to_vec().iter().map(|v| v * 3.7).collect(), &[6, 5]).unwrap();
        let b = spc_loss(&scaled, &seg, &cfg(), &proj).unwrap().unwrap().item().unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn spc_matches_brute_force() {
        for seed in 0..30u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let d = 3 + (seed as usize % 4);
            let p = 2 + (seed as usize % 3);
            let l = 2 + (seed as usize % 7);
            let lo = seed as usize % l;
            let hi = (lo + 1 + (seed as usize % 3)).min(l);
            let seg: Vec<usize> = (lo..hi).collect();
            let c = ContrastiveConfig { proj_dim: p, ..ContrastiveConfig::default() };
            let proj = proj_head(d, p, &mut rng);
            let tokens = Tensor::randn(&[l, d], &mut rng);
            let got = spc_loss(&tokens, &seg, &c, &proj).unwrap().unwrap().item().unwrap();
            let want = oracles::spc_loss_oracle(
                &tokens.to_vec(),
                l,
                d,
                &seg,
                &proj.w.to_vec(),
                p,
                c.tau,
                NORM_EPS,
            )
            .unwrap();
            assert!((got - want).abs() < 1e-10, "seed {seed}: {got} vs {want}");

            let got = spc_loss_unpooled(&tokens, &seg, &c, &proj).unwrap().unwrap().item().unwrap();
            let want = oracles::spc_unpooled_oracle(
                &tokens.to_vec(),
                l,
                d,
                &seg,
                &proj.w.to_vec(),
                p,
                c.tau,
                NORM_EPS,
            )
            .unwrap();
            assert!((got - want).abs() < 1e-10, "unpooled seed {seed}: {got} vs {want}");
        }
    }

    #[test]
    fn unpooled_spc_equals_pooled_for_singleton_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let proj = proj_head(5, 3, &mut rng);
        let tokens = Tensor::randn(&[6, 5], &mut rng);
        let a = spc_loss(&tokens, &[4], &cfg(), &proj).unwrap().unwrap().item().unwrap();
        let b = spc_loss_unpooled(&tokens, &[4], &cfg(), &proj).unwrap().unwrap().item().unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn degenerate_focal_is_scaled_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p: Vec<f64> = (0..8).map(|_| rng.gen_range(0.05..0.95)).collect();
        let labels: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
        let pt = Tensor::from_vec(p.clone(), &[8]).unwrap();
        let got = focal_loss(&pt, &labels, 0.5, 0.0).unwrap().item().unwrap();
        let bce: f64 = p
            .iter()
            .zip(labels.iter())
            .map(|(&pv, &y)| if y > 0.5 { -pv.ln() } else { -(1.0 - pv).ln() })
            .sum::<f64>()
            / 8.0;
        assert!((got - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn focal_vanishes_on_perfect_predictions() {
        let mut prev = f64::INFINITY;
        for eps in [1e-2, 1e-4, 1e-6] {
            let p = Tensor::from_vec(vec![1.0 - eps, eps, 1.0 - eps], &[3]).unwrap();
            let labels = [1.0, 0.0, 1.0];
            let loss = focal_loss(&p, &labels, 0.25, 2.0).unwrap().item().unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn focal_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for gamma in [0.0, 2.0] {
            let p: Vec<f64> = (0..10).map(|_| rng.gen_range(0.01..0.99)).collect();
            let labels: Vec<f64> = (0..10).map(|_| f64::from(rng.gen_bool(0.4))).collect();
            let got = focal_loss(&Tensor::from_vec(p.clone(), &[10]).unwrap(), &labels, 0.25, gamma)
                .unwrap()
                .item()
                .unwrap();
            let want = oracles::focal_loss_oracle(&p, &labels, 0.25, gamma);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn diou_translation_invariance_and_worked_value() {
        let pred = Tensor::from_vec(vec![0.0, 1.0], &[1, 2]).unwrap();
        let loss = diou_loss(&pred, &[(2.0, 3.0)]).unwrap().item().unwrap();
        assert!((loss - (1.0 + 4.0 / 9.0)).abs() < 1e-12);
        let shifted = Tensor::from_vec(vec![10.0, 11.0], &[1, 2]).unwrap();
        let moved = diou_loss(&shifted, &[(12.0, 13.0)]).unwrap().item().unwrap();
        assert!((loss - moved).abs() < 1e-12);
        let same = Tensor::from_vec(vec![2.0, 3.0], &[1, 2]).unwrap();
        assert_eq!(diou_loss(&same, &[(2.0, 3.0)]).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn total_combines_linearly_and_names_bad_components() {
        let s = |v: f64| Tensor::from_vec(vec![v], &[1]).unwrap();
        let c = ContrastiveConfig { lambda_acc: 0.0, lambda_spc: 0.0, ..cfg() };
        let t = total_loss(&s(1.5), &s(0.5), &s(9.0), &s(9.0), &c).unwrap();
        assert_eq!(t.item().unwrap(), 2.0);
        for (la, ls) in [(10.0, 1.0), (1.0, 0.1), (0.5, 0.6)] {
            let c = ContrastiveConfig { lambda_acc: la, lambda_spc: ls, ..cfg() };
            let t = total_loss(&s(1.0), &s(2.0), &s(3.0), &s(4.0), &c).unwrap();
            assert!((t.item().unwrap() - (3.0 + la * 3.0 + ls * 4.0)).abs() < 1e-12);
        }
        let err = total_loss(&s(1.0), &s(f64::NAN), &s(0.0), &s(0.0), &cfg()).unwrap_err();
        assert!(err.to_string().contains("reg"), "{err}");
    }

    #[test]
    fn contrastive_losses_backpropagate_to_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let proj = proj_head(5, 3, &mut rng);
        let tokens = Tensor::randn(&[10, 5], &mut rng).requires_grad();
        let anchors = Tensor::randn(&[5, 5], &mut rng).requires_grad();
        // margin 1 over 5 anchors leaves real negatives in play
        let c = ContrastiveConfig { margin: 1, ..cfg() };
        let loss = acc_loss(&anchors, &tokens, 2, &c, &proj, 0).unwrap();
        loss.backward().unwrap();
        let gn: f64 = tokens.grad().unwrap().iter().map(|g| g * g).sum();
        assert!(gn > 0.0, "acc gradient must reach the tokens");
        let gn: f64 = anchors.grad().unwrap().iter().map(|g| g * g).sum();
        assert!(gn > 0.0, "acc gradient must reach the anchors");
        tokens.zero_grad();
        let loss = spc_loss(&tokens, &[1, 2], &cfg(), &proj).unwrap().unwrap();
        loss.backward().unwrap();
        let gn: f64 = tokens.grad().unwrap().iter().map(|g| g * g).sum();
        assert!(gn > 0.0, "spc gradient must reach the tokens");
    }
}
