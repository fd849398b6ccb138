//! One TOML file drives every subcommand. Each section has full defaults,
//! so a config file only spells out what it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ContrastiveConfig;
use crate::model::ModelConfig;
use crate::synthdata::GenConfig;

fn default_true_weights() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    /// Episodes per optimizer step (losses averaged across the batch).
    pub batch_size: usize,
    pub seed: u64,
    /// Run held-out eval every this many epochs; 0 disables interim eval.
    pub eval_every: usize,
    pub checkpoint: PathBuf,
    pub data_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            clip_norm: 1.0,
            warmup_steps: 100,
            epochs: 30,
            batch_size: 1,
            seed: 0,
            eval_every: 0,
            checkpoint: PathBuf::from("out/model.hgck"),
            data_dir: PathBuf::from("data"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub sigma: f64,
    pub score_floor: f64,
    pub top_k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { sigma: 0.5, score_floor: 0.001, top_k: 10 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if !(self.score_floor >= 0.0) {
            return Err(Error::Config("score floor must be >= 0".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub gen: GenConfig,
    pub train_episodes: usize,
    pub eval_episodes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { gen: GenConfig::default(), train_episodes: 200, eval_episodes: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub dim: usize,
    pub layers: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub window: usize,
    pub heads: usize,
    pub stride: usize,
    /// Timed forwards per length; the median is reported.
    pub repeats: usize,
    #[serde(default = "default_true_weights")]
    pub interleave: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![1024, 2048, 4096, 8192],
            dim: 16,
            layers: 2,
            d_state: 8,
            d_conv: 3,
            expand: 2,
            window: 5,
            heads: 2,
            stride: 2,
            repeats: 5,
            interleave: true,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.len() < 4 {
            return Err(Error::Config("bench needs at least 4 lengths".into()));
        }
        if !self.lengths.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("bench lengths must be strictly ascending".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("bench repeats must be >= 1".into()));
        }
        Ok(())
    }
}

/// The whole run file: [model], [train], [data], [decode], [bench].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub decode: DecodeConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        let model = ModelConfig {
            d_video: data.gen.d_v,
            d_query: data.gen.d_q,
            dim: 16,
            num_layers: 3,
            d_state: 8,
            text_layers: 1,
            text_heads: 2,
            fusion_heads: 2,
            contrastive: ContrastiveConfig { proj_dim: 16, ..ContrastiveConfig::default() },
            ..ModelConfig::default()
        };
        RunConfig {
            model,
            train: TrainConfig::default(),
            data,
            decode: DecodeConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.gen.validate()?;
        self.decode.validate()?;
        self.bench.validate()?;
        if self.data.train_episodes == 0 || self.data.eval_episodes == 0 {
            return Err(Error::Config("episode counts must be >= 1".into()));
        }
        if self.model.d_video != self.data.gen.d_v || self.model.d_query != self.data.gen.d_q {
            return Err(Error::Config(format!(
                "model expects video/query widths {}/{}, generator produces {}/{}",
                self.model.d_video, self.model.d_query, self.data.gen.d_v, self.data.gen.d_q
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads the file when given, otherwise the built-in defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            Some(p) => RunConfig::load(p),
            None => {
                let cfg = RunConfig::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }
}
