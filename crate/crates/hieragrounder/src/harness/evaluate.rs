//! Dataset evaluation: decode every query, rank with soft suppression,
//! report the recall table, plus the uniform-random-proposal baseline.
//!
//! Episodes run in parallel. Tensors are Rc-backed graph nodes and cannot
//! cross threads, so the episodes are flattened to plain buffers first and
//! each worker rebuilds its own model from a parameter snapshot. Results
//! are collected in episode order, making the output independent of the
//! thread count. HG_THREADS caps the pool.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint;
use crate::decode::{
    make_proposals, recall_table, soft_nms, GroundTruth, PredictionRecord, Proposal, RecallTable,
};
use crate::error::{Error, Result};
use crate::harness::config::DecodeConfig;
use crate::model::{GroundingModel, ModelConfig};
use crate::nn::Parameter;
use crate::no_grad;
use crate::synthdata::Episode;
use crate::tensor::Tensor;

/// Plain-data copy of the weights, safe to move between threads.
pub type ParamSnapshot = Vec<(String, Vec<usize>, Vec<f64>)>;

pub fn snapshot_params(params: &[Parameter]) -> ParamSnapshot {
    params
        .iter()
        .map(|p| (p.name.clone(), p.t.shape().to_vec(), p.t.to_vec()))
        .collect()
}

pub fn restore_params(params: &[Parameter], snap: &ParamSnapshot) -> Result<()> {
    if params.len() != snap.len() {
        return Err(Error::Config(format!(
            "snapshot has {} parameters, model has {}",
            snap.len(),
            params.len()
        )));
    }
    let by_name: std::collections::HashMap<&str, &Parameter> =
        params.iter().map(|p| (p.name.as_str(), p)).collect();
    for (name, shape, vals) in snap {
        let p = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Config(format!("snapshot parameter {name} not in model")))?;
        if p.t.shape() != shape.as_slice() {
            return Err(Error::Config(format!(
                "snapshot {name}: shape {shape:?} vs model {:?}",
                p.t.shape()
            )));
        }
        p.t.set_data(vals);
    }
    Ok(())
}

struct RawQuery {
    embedding: Vec<f64>,
    rows: usize,
    cols: usize,
    gt: (f64, f64),
}

struct RawEpisode {
    features: Vec<f64>,
    l0: usize,
    d_v: usize,
    queries: Vec<RawQuery>,
}

fn flatten(eps: &[Episode]) -> Vec<RawEpisode> {
    eps.iter()
        .map(|ep| RawEpisode {
            features: ep.features.to_vec(),
            l0: ep.features.rows(),
            d_v: ep.features.shape()[1],
            queries: ep
                .queries
                .iter()
                .map(|q| RawQuery {
                    embedding: q.embedding.to_vec(),
                    rows: q.embedding.rows(),
                    cols: q.embedding.shape()[1],
                    gt: q.gt,
                })
                .collect(),
        })
        .collect()
}

fn rebuild(cfg: &ModelConfig, snap: &ParamSnapshot) -> Result<GroundingModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = GroundingModel::new(*cfg, &mut rng)?;
    restore_params(&model.params(), snap)?;
    Ok(model)
}

/// Ranked proposals for every query of one episode.
fn decode_episode(
    model: &GroundingModel,
    ep: &RawEpisode,
    dc: &DecodeConfig,
) -> Result<Vec<(Vec<Proposal>, GroundTruth)>> {
    no_grad(|| {
        let video = Tensor::from_vec(ep.features.clone(), &[ep.l0, ep.d_v])?;
        let v0 = model.video_in.forward(&video)?;
        let pyramid = model.encode_video(&v0)?;
        let strides: Vec<usize> = pyramid.levels.iter().map(|l| l.effective_stride).collect();
        let mut out = Vec::with_capacity(ep.queries.len());
        for q in &ep.queries {
            let emb = Tensor::from_vec(q.embedding.clone(), &[q.rows, q.cols])?;
            let text = model.text.forward(&emb)?;
            let mut scores = Vec::new();
            let mut offsets = Vec::new();
            for level in &pyramid.levels {
                let fused = model.fusion.forward(&level.refined, &text)?;
                scores.push(crate::ops::sigmoid(&model.cls_head.forward(&fused)?)?);
                offsets.push(crate::ops::softplus(&model.reg_head.forward(&fused)?)?);
            }
            let props = make_proposals(&scores, &offsets, &strides, ep.l0, dc.score_floor)?;
            let ranked = soft_nms(&props, dc.sigma, dc.top_k)?;
            out.push((ranked, GroundTruth { t_start: q.gt.0, t_end: q.gt.1 }));
        }
        Ok(out)
    })
}

fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    let threads = std::env::var("HG_THREADS").ok().and_then(|s| s.parse::<usize>().ok());
    match threads {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}

/// Full decode pipeline over a dataset. Returns the recall grid and one
/// prediction record per query (ids in dataset order).
pub fn evaluate_model(
    model: &GroundingModel,
    eps: &[Episode],
    dc: &DecodeConfig,
) -> Result<(RecallTable, Vec<PredictionRecord>)> {
    if eps.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    dc.validate()?;
    let raw = flatten(eps);
    let snap = snapshot_params(&model.params());
    let cfg = model.cfg;
    let per_episode: Vec<Vec<(Vec<Proposal>, GroundTruth)>> = with_pool(|| {
        raw.par_iter()
            .map_init(
                || rebuild(&cfg, &snap),
                |worker, ep| match worker {
                    Ok(m) => decode_episode(m, ep, dc),
                    Err(e) => Err(Error::Config(format!("worker model rebuild failed: {e}"))),
                },
            )
            .collect::<Result<_>>()
    })?;

    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut records = Vec::new();
    for episode in per_episode {
        for (ranked, gt) in episode {
            records.push(PredictionRecord::from_ranked(records.len() as u64, &ranked));
            preds.push(ranked);
            gts.push(gt);
        }
    }
    Ok((recall_table(&preds, &gts)?, records))
}

/// Evaluates the model stored in a checkpoint. When `expected` is given,
/// the stored model config must match it exactly.
pub fn evaluate_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
    eps: &[Episode],
    dc: &DecodeConfig,
) -> Result<(RecallTable, Vec<PredictionRecord>)> {
    let (stored, _) = checkpoint::read_checkpoint::<ModelConfig>(path)?;
    if let Some(exp) = expected {
        if *exp != stored {
            return Err(Error::Config(
                "checkpoint was trained with a different model config than requested".into(),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = GroundingModel::new(stored, &mut rng)?;
    checkpoint::load_into::<ModelConfig>(path, &model.params())?;
    evaluate_model(&model, eps, dc)
}

/// Recall of `per_query` uniformly random proposals per query, the
/// reference point for "did training learn anything".
pub fn random_baseline(
    gts: &[(f64, f64)],
    l0: usize,
    per_query: usize,
    seed: u64,
) -> Result<RecallTable> {
    let mut preds = Vec::with_capacity(gts.len());
    let mut truth = Vec::with_capacity(gts.len());
    for (qi, &gt) in gts.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (qi as u64).wrapping_mul(0x9e37_79b9));
        let mut ranked = Vec::with_capacity(per_query);
        while ranked.len() < per_query {
            let a: f64 = rng.gen_range(0.0..l0 as f64);
            let b: f64 = rng.gen_range(0.0..l0 as f64);
            if a == b {
                continue;
            }
            ranked.push(Proposal {
                t_s: a.min(b),
                t_e: a.max(b),
                score: 0.5,
                level: 0,
                token: ranked.len(),
            });
        }
        preds.push(ranked);
        truth.push(GroundTruth { t_start: gt.0, t_end: gt.1 });
    }
    recall_table(&preds, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::recall_at;
    use crate::synthdata::gen_dataset;

    fn tiny_setup() -> (GroundingModel, Vec<Episode>) {
        let gen = crate::harness::testutil::tiny_gen();
        let mc = crate::harness::testutil::tiny_model();
        let eps = gen_dataset(&gen, 50, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (GroundingModel::new(mc, &mut rng).unwrap(), eps)
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (model, eps) = tiny_setup();
        let dc = DecodeConfig::default();
        let (t1, r1) = evaluate_model(&model, &eps, &dc).unwrap();
        let (t2, r2) = evaluate_model(&model, &eps, &dc).unwrap();
        assert_eq!(serde_json::to_string(&t1).unwrap(), serde_json::to_string(&t2).unwrap());
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
        assert_eq!(r1.len(), 6, "3 episodes x 2 queries");
    }

    #[test]
    fn checkpoint_round_trip_matches_in_memory_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hgck");
        let (model, eps) = tiny_setup();
        checkpoint::save_checkpoint(&path, &model.cfg, &model.params()).unwrap();
        let dc = DecodeConfig::default();
        let (mem_table, mem_recs) = evaluate_model(&model, &eps, &dc).unwrap();
        let (ck_table, ck_recs) = evaluate_checkpoint(&path, Some(&model.cfg), &eps, &dc).unwrap();
        assert_eq!(
            serde_json::to_string(&mem_table).unwrap(),
            serde_json::to_string(&ck_table).unwrap()
        );
        assert_eq!(
            serde_json::to_string(&mem_recs).unwrap(),
            serde_json::to_string(&ck_recs).unwrap()
        );
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hgck");
        let (model, eps) = tiny_setup();
        checkpoint::save_checkpoint(&path, &model.cfg, &model.params()).unwrap();
        let mut other = model.cfg;
        other.window = 5;
        let err = evaluate_checkpoint(&path, Some(&other), &eps, &DecodeConfig::default())
            .map(|_| ())
            .unwrap_err();
        assert!(err.to_string().contains("different model config"), "{err}");
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        // plumbing check: feeding the ground truth as the only proposal
        // drives every cell of the table to 1
        let gts = [(3.0, 9.0), (10.0, 30.0), (1.0, 2.0)];
        let preds: Vec<Vec<Proposal>> = gts
            .iter()
            .map(|&(s, e)| vec![Proposal { t_s: s, t_e: e, score: 1.0, level: 0, token: 0 }])
            .collect();
        let truth: Vec<GroundTruth> =
            gts.iter().map(|&(s, e)| GroundTruth { t_start: s, t_end: e }).collect();
        let table = recall_table(&preds, &truth).unwrap();
        assert_eq!(table.average, 1.0);
    }

    #[test]
    fn random_baseline_is_weak_and_reproducible() {
        let gts: Vec<(f64, f64)> = (0..40)
            .map(|i| {
                let s = (i * 5) as f64 % 200.0;
                (s, s + 6.0)
            })
            .collect();
        let a = random_baseline(&gts, 256, 1000, 9).unwrap();
        let b = random_baseline(&gts, 256, 1000, 9).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.r1_05 < 0.4, "a random top-1 should rarely reach IoU 0.5: {}", a.r1_05);
        assert!(a.r5_03 >= a.r1_03);
    }

    #[test]
    fn thread_cap_does_not_change_results() {
        let (model, eps) = tiny_setup();
        let dc = DecodeConfig::default();
        let (base, _) = evaluate_model(&model, &eps, &dc).unwrap();
        std::env::set_var("HG_THREADS", "1");
        let (capped, _) = evaluate_model(&model, &eps, &dc).unwrap();
        std::env::remove_var("HG_THREADS");
        assert_eq!(
            serde_json::to_string(&base).unwrap(),
            serde_json::to_string(&capped).unwrap()
        );
    }

    #[test]
    fn recall_helpers_agree_with_direct_calls() {
        let gts = [(0.0, 10.0)];
        let preds = vec![vec![Proposal { t_s: 0.0, t_e: 10.0, score: 0.9, level: 0, token: 0 }]];
        let truth = [GroundTruth { t_start: 0.0, t_end: 10.0 }];
        let table = recall_table(&preds, &truth).unwrap();
        assert_eq!(table.r1_03, recall_at(&preds, &truth, 1, 0.3).unwrap());
        assert_eq!(gts.len(), 1);
    }
}
