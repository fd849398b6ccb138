//! Training loop.
//!
//! One step groups an episode's queries: the video is encoded once and every
//! query reuses the pyramid. Loss components are means, aggregated as
//!   focal + diou + lambda_acc * acc + lambda_spc * spc,
//! with the anchor contrast computed once per episode (it does not depend
//! on the query). Steps are single-threaded with a fixed reduction order,
//! so a seed fully determines the run.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::harness::config::{DecodeConfig, TrainConfig};
use crate::harness::evaluate;
use crate::harness::optim::AdamW;
use crate::losses;
use crate::model::{assign_targets, GroundingModel, ModelConfig};
use crate::ops;
use crate::synthdata::Episode;
use crate::tensor::Tensor;

const FOCAL_ALPHA: f64 = 0.25;
const FOCAL_GAMMA: f64 = 2.0;

/// Scalar view of one step's loss, for tracing and abort messages.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub acc: f64,
    pub spc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossParts,
    pub grad_norm: f64,
    pub lr: f64,
    /// Held-out average recall, present on eval-cadence epochs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_avg_recall: Option<f64>,
}

pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn mean_of(terms: Vec<Tensor>) -> Result<Tensor> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let mut sum = it.next().expect("mean_of needs at least one term");
    for t in it {
        sum = ops::add(&sum, &t)?;
    }
    ops::affine(&sum, 1.0 / n as f64, 0.0)
}

/// Builds the full loss for one episode. Returns the graph node plus the
/// scalar breakdown. `seed` steers the contrastive negative draws.
pub fn episode_loss(
    model: &GroundingModel,
    ep: &Episode,
    seed: u64,
) -> Result<(Tensor, LossParts)> {
    if ep.queries.is_empty() {
        return Err(Error::Config("episode has no queries".into()));
    }
    let ccfg = &model.cfg.contrastive;
    let v0 = model.video_in.forward(&ep.features)?;
    let pyramid = model.encode_video(&v0)?;
    let levels = &pyramid.levels;

    // anchor contrast is query-independent; skip entirely when unweighted
    // so the trace reports an exact zero
    let acc = if ccfg.lambda_acc != 0.0 {
        let per_level = levels
            .iter()
            .enumerate()
            .map(|(l, level)| {
                losses::acc_loss(
                    &level.anchors_out,
                    &level.refined,
                    model.cfg.stride,
                    ccfg,
                    model.proj_head(l),
                    seed.wrapping_add(l as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        mean_of(per_level)?
    } else {
        Tensor::zeros(&[1])
    };

    let mut cls_terms = Vec::new();
    let mut reg_terms = Vec::new();
    let mut spc_terms = Vec::new();
    for q in &ep.queries {
        let text = model.text.forward(&q.embedding)?;
        for (l, level) in levels.iter().enumerate() {
            let len = level.refined.rows();
            let targets = assign_targets(len, level.effective_stride, q.gt);

            let fused = model.fusion.forward(&level.refined, &text)?;
            let p = ops::sigmoid(&model.cls_head.forward(&fused)?)?;
            cls_terms.push(losses::focal_loss(&p, &targets.labels, FOCAL_ALPHA, FOCAL_GAMMA)?);

            if !targets.positive.is_empty() {
                let delta = ops::softplus(&model.reg_head.forward(&fused)?)?;
                let sel = ops::select_rows(&delta, &targets.positive)?;
                let k = targets.positive.len();
                let sign =
                    Tensor::from_vec([-1.0, 1.0].repeat(k), &[k, 2])?;
                let base = Tensor::from_vec(
                    targets.positive.iter().flat_map(|&t| [t as f64, t as f64]).collect(),
                    &[k, 2],
                )?;
                let interval = ops::add(&ops::mul(&sel, &sign)?, &base)?;
                let scaled = ops::affine(&interval, level.effective_stride as f64, 0.0)?;
                reg_terms.push(losses::diou_loss(&scaled, &vec![q.gt; k])?);
            }

            if ccfg.lambda_spc != 0.0 {
                let spc = if ccfg.unpooled_spc {
                    losses::spc_loss_unpooled(&level.refined, &targets.positive, ccfg, model.proj_head(l))?
                } else {
                    losses::spc_loss(&level.refined, &targets.positive, ccfg, model.proj_head(l))?
                };
                if let Some(t) = spc {
                    spc_terms.push(t);
                }
            }
        }
    }

    let cls = mean_of(cls_terms)?;
    let reg = if reg_terms.is_empty() { Tensor::zeros(&[1]) } else { mean_of(reg_terms)? };
    let spc = if spc_terms.is_empty() { Tensor::zeros(&[1]) } else { mean_of(spc_terms)? };
    let total = losses::total_loss(&cls, &reg, &acc, &spc, ccfg)?;
    let parts = LossParts {
        total: total.item()?,
        cls: cls.item()?,
        reg: reg.item()?,
        acc: acc.item()?,
        spc: spc.item()?,
    };
    Ok((total, parts))
}

/// Trains a fresh model on `train_eps`. The checkpoint lands at
/// `tc.checkpoint`; trace rows stream to `trace_out` as JSON lines.
pub fn train(
    model_cfg: &ModelConfig,
    tc: &TrainConfig,
    train_eps: &[Episode],
    eval_eps: &[Episode],
    decode_cfg: &DecodeConfig,
    mut trace_out: Option<&mut dyn Write>,
) -> Result<(GroundingModel, TrainReport)> {
    model_cfg.validate()?;
    tc.validate()?;
    if train_eps.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let model = GroundingModel::new(*model_cfg, &mut rng)?;
    let params = model.params();
    let mut opt = AdamW::new(tc);

    let mut trace = Vec::new();
    let mut written = 0usize;
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let mut step = 0usize;
    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..train_eps.len()).collect();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ (epoch as u64) << 32);
        order.shuffle(&mut epoch_rng);

        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            step += 1;
            let mut batch_terms = Vec::with_capacity(chunk.len());
            let mut agg = LossParts { total: 0.0, cls: 0.0, reg: 0.0, acc: 0.0, spc: 0.0 };
            for &idx in chunk {
                let neg_seed = tc.seed ^ ((epoch as u64) << 40) ^ (idx as u64);
                let (loss, parts) = episode_loss(&model, &train_eps[idx], neg_seed)?;
                agg.total += parts.total / chunk.len() as f64;
                agg.cls += parts.cls / chunk.len() as f64;
                agg.reg += parts.reg / chunk.len() as f64;
                agg.acc += parts.acc / chunk.len() as f64;
                agg.spc += parts.spc / chunk.len() as f64;
                batch_terms.push(loss);
            }
            let batch_loss = mean_of(batch_terms)?;
            batch_loss.backward()?;
            let grad_norm = opt.step(&params)?;
            epoch_sum += agg.total;
            epoch_steps += 1;
            trace.push(TraceRow {
                epoch,
                step,
                loss: agg,
                grad_norm,
                lr: opt.lr_at(opt.steps_taken()),
                eval_avg_recall: None,
            });
        }
        epoch_losses.push(epoch_sum / epoch_steps as f64);

        if tc.eval_every > 0 && epoch % tc.eval_every == 0 && !eval_eps.is_empty() {
            let (table, _) = evaluate::evaluate_model(&model, eval_eps, decode_cfg)?;
            if let Some(row) = trace.last_mut() {
                row.eval_avg_recall = Some(table.average);
            }
        }
        if let Some(w) = trace_out.as_mut() {
            for row in &trace[written..] {
                let line = serde_json::to_string(row)
                    .map_err(|e| Error::Format(format!("trace row: {e}")))?;
                writeln!(w, "{line}")?;
            }
            written = trace.len();
        }
    }

    if let Some(parent) = tc.checkpoint.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    checkpoint::save_checkpoint(&tc.checkpoint, model_cfg, &params)?;
    Ok((model, TrainReport { trace, epoch_losses }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::RunConfig;
    use crate::harness::testutil::{tiny_gen, tiny_model};
    use crate::synthdata::gen_dataset;

    fn tiny_train(dir: &std::path::Path, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            seed,
            warmup_steps: 10,
            lr: 3e-3,
            checkpoint: dir.join("model.hgck"),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn smoke_run_writes_a_loadable_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let gen = tiny_gen();
        let eps = gen_dataset(&gen, 1, 4).unwrap();
        let tc = tiny_train(dir.path(), 1, 3);
        let (model, report) =
            train(&tiny_model(), &tc, &eps, &[], &DecodeConfig::default(), None).unwrap();
        assert_eq!(report.epoch_losses.len(), 1);
        assert_eq!(report.trace.len(), 4);

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let fresh = GroundingModel::new(tiny_model(), &mut rng).unwrap();
        let stored: ModelConfig =
            checkpoint::load_into(&tc.checkpoint, &fresh.params()).unwrap();
        assert_eq!(stored, tiny_model());
        for (a, b) in model.params().iter().zip(fresh.params().iter()) {
            assert_eq!(a.t.to_vec(), b.t.to_vec(), "{}", a.name);
        }
    }

    #[test]
    fn zero_weights_silence_the_contrastive_trace() {
        let dir = tempfile::tempdir().unwrap();
        let gen = tiny_gen();
        let eps = gen_dataset(&gen, 2, 3).unwrap();
        let mut mc = tiny_model();
        mc.contrastive.lambda_acc = 0.0;
        mc.contrastive.lambda_spc = 0.0;
        let tc = tiny_train(dir.path(), 2, 5);
        let (_, report) = train(&mc, &tc, &eps, &[], &DecodeConfig::default(), None).unwrap();
        for row in &report.trace {
            assert_eq!(row.loss.acc, 0.0);
            assert_eq!(row.loss.spc, 0.0);
        }
    }

    #[test]
    fn loss_drops_by_epoch_five_across_seeds() {
        let gen = tiny_gen();
        for seed in [1u64, 2, 3] {
            let dir = tempfile::tempdir().unwrap();
            let eps = gen_dataset(&gen, 10 + seed, 8).unwrap();
            let tc = tiny_train(dir.path(), 5, seed);
            let (_, report) =
                train(&tiny_model(), &tc, &eps, &[], &DecodeConfig::default(), None).unwrap();
            assert!(
                report.epoch_losses[4] < report.epoch_losses[0],
                "seed {seed}: {:?}",
                report.epoch_losses
            );
        }
    }

    #[test]
    fn same_seed_trains_to_identical_weights() {
        let gen = tiny_gen();
        let eps = gen_dataset(&gen, 7, 3).unwrap();
        let run = |dir: &std::path::Path| {
            let tc = tiny_train(dir, 2, 11);
            let (model, _) =
                train(&tiny_model(), &tc, &eps, &[], &DecodeConfig::default(), None).unwrap();
            model
                .params()
                .iter()
                .flat_map(|p| p.t.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<u64>>()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        assert_eq!(run(d1.path()), run(d2.path()));
    }

    #[test]
    fn trace_rows_stream_as_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let gen = tiny_gen();
        let eps = gen_dataset(&gen, 21, 2).unwrap();
        let tc = tiny_train(dir.path(), 2, 1);
        let mut buf: Vec<u8> = Vec::new();
        train(&tiny_model(), &tc, &eps, &[], &DecodeConfig::default(), Some(&mut buf))
            .map(|_| ())
            .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<TraceRow> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.loss.total.is_finite()));
    }

    #[test]
    fn default_run_config_sections_fit_together() {
        // the full-size default is exercised by the acceptance suite; here
        // just prove the sections cross-validate
        RunConfig::default().validate().unwrap();
    }
}
