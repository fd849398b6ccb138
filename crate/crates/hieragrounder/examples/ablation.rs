// Retrains the model with one piece removed at a time (interleaving,
// bidirectional scan, local attention, gates, pooling and contrastive
// variants) and compares held-out recall. The budget here is deliberately
// small so the run finishes in well under a minute; expect noisy numbers
// at this scale, and the auxiliary contrastive terms in particular need
// more episodes and epochs than this before they pay off. The point of
// the example is the mechanics of the sweep.

use hieragrounder::harness::ablate::{ablate, format_table};
use hieragrounder::harness::config::{DataConfig, DecodeConfig, TrainConfig};
use hieragrounder::losses::ContrastiveConfig;
use hieragrounder::model::ModelConfig;
use hieragrounder::synthdata::GenConfig;
use hieragrounder::Result;

fn main() -> Result<()> {
    let base = ModelConfig {
        d_video: 32,
        d_query: 16,
        dim: 16,
        num_layers: 2,
        d_state: 8,
        text_layers: 1,
        text_heads: 2,
        fusion_heads: 2,
        contrastive: ContrastiveConfig { proj_dim: 16, ..ContrastiveConfig::default() },
        ..ModelConfig::default()
    };
    let data = DataConfig {
        gen: GenConfig {
            l0: 128,
            d_v: 32,
            d_q: 16,
            n_event_classes: 6,
            events_per_episode: 2,
            queries_per_episode: 2,
            ..GenConfig::default()
        },
        train_episodes: 24,
        eval_episodes: 12,
    };
    let scratch = std::env::temp_dir().join("hieragrounder_ablation_example");
    let tc = TrainConfig {
        epochs: 6,
        warmup_steps: 30,
        checkpoint: scratch.join("model.hgck"),
        ..TrainConfig::default()
    };

    let rows = ablate(&base, &tc, &data, &DecodeConfig::default(), &[1, 2], &scratch)?;
    print!("{}", format_table(&rows));
    Ok(())
}
