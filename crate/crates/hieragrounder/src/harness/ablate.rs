//! The ablation matrix: four architecture toggles plus the 2x2 grid of
//! contrastive loss weights, every variant trained and evaluated under the
//! same seeds, data and budget. "full" is the both-losses-on, all-toggles-on
//! row the others are measured against.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{DataConfig, DecodeConfig, TrainConfig};
use crate::harness::{evaluate, train};
use crate::model::ModelConfig;
use crate::nn::total_param_count;
use crate::synthdata::gen_dataset;

pub const VARIANTS: [&str; 8] = [
    "full",
    "no_interleave",
    "no_bidi",
    "no_local",
    "no_gates",
    "no_acc",
    "no_spc",
    "no_contrast",
];

/// The base config with one ingredient turned off.
pub fn variant_config(base: &ModelConfig, name: &str) -> Result<ModelConfig> {
    let mut cfg = *base;
    match name {
        "full" => {}
        "no_interleave" => cfg.interleave = false,
        "no_bidi" => cfg.bidirectional = false,
        "no_local" => cfg.local_attention = false,
        "no_gates" => cfg.gates = false,
        "no_acc" => cfg.contrastive.lambda_acc = 0.0,
        "no_spc" => cfg.contrastive.lambda_spc = 0.0,
        "no_contrast" => {
            cfg.contrastive.lambda_acc = 0.0;
            cfg.contrastive.lambda_spc = 0.0;
        }
        other => return Err(Error::Config(format!("unknown ablation variant {other}"))),
    }
    Ok(cfg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub params: usize,
    /// Held-out average recall per seed, then their mean.
    pub per_seed: Vec<f64>,
    pub mean_avg_recall: f64,
}

/// Trains and evaluates every variant. Seed s uses its own dataset pair,
/// identical across variants; checkpoints land under `scratch`.
pub fn ablate(
    base: &ModelConfig,
    tc: &TrainConfig,
    data: &DataConfig,
    dc: &DecodeConfig,
    seeds: &[u64],
    scratch: &Path,
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    std::fs::create_dir_all(scratch)?;
    let mut datasets = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let train_eps = gen_dataset(&data.gen, seed.wrapping_mul(1000), data.train_episodes)?;
        let eval_eps =
            gen_dataset(&data.gen, seed.wrapping_mul(1000).wrapping_add(500_000), data.eval_episodes)?;
        datasets.push((train_eps, eval_eps));
    }

    let mut rows = Vec::with_capacity(VARIANTS.len());
    for name in VARIANTS {
        let cfg = variant_config(base, name)?;
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut params = 0;
        for (i, &seed) in seeds.iter().enumerate() {
            let mut tc_run = tc.clone();
            tc_run.seed = seed;
            tc_run.checkpoint = scratch.join(format!("{name}_s{seed}.hgck"));
            let (model, _) =
                train::train(&cfg, &tc_run, &datasets[i].0, &[], dc, None)?;
            params = total_param_count(&model.params());
            let (table, _) = evaluate::evaluate_model(&model, &datasets[i].1, dc)?;
            per_seed.push(table.average);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        rows.push(AblationRow { name: name.into(), params, per_seed, mean_avg_recall: mean });
    }
    Ok(rows)
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant         params   avg-recall   per-seed\n");
    for r in rows {
        let seeds = r
            .per_seed
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&format!(
            "{:<15} {:>7}   {:>9.4}   {seeds}\n",
            r.name, r.params, r.mean_avg_recall
        ));
    }
    out
}
