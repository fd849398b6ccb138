// End-to-end loop on generated episodes: build a dataset, train a small
// model, evaluate recall on held-out episodes against a random-proposal
// baseline, then reload the checkpoint and confirm it reproduces the same
// numbers. Takes a few seconds; the sizes here are cut down from the
// defaults so the example stays quick.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hieragrounder::harness::config::{DecodeConfig, TrainConfig};
use hieragrounder::harness::evaluate::{evaluate_checkpoint, evaluate_model, random_baseline};
use hieragrounder::harness::train::train;
use hieragrounder::losses::ContrastiveConfig;
use hieragrounder::model::{GroundingModel, ModelConfig};
use hieragrounder::synthdata::{gen_dataset, GenConfig};
use hieragrounder::Result;

fn main() -> Result<()> {
    let gc = GenConfig {
        l0: 128,
        d_v: 32,
        d_q: 16,
        n_event_classes: 6,
        events_per_episode: 2,
        queries_per_episode: 2,
        ..GenConfig::default()
    };
    let mc = ModelConfig {
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
    let scratch = std::env::temp_dir().join("hieragrounder_train_example");
    std::fs::create_dir_all(&scratch)?;
    let tc = TrainConfig {
        epochs: 14,
        warmup_steps: 50,
        checkpoint: scratch.join("model.hgck"),
        ..TrainConfig::default()
    };
    let dc = DecodeConfig::default();

    let train_eps = gen_dataset(&gc, 1, 48)?;
    let eval_eps = gen_dataset(&gc, 1_000_001, 24)?;
    println!("training on {} episodes, evaluating on {}", train_eps.len(), eval_eps.len());

    // where chance lands on this eval set, and where a fresh model lands
    let gts: Vec<(f64, f64)> = eval_eps.iter().flat_map(|e| e.queries.iter().map(|q| q.gt)).collect();
    let baseline = random_baseline(&gts, gc.l0, 1000, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fresh = GroundingModel::new(mc, &mut rng)?;
    let (untrained, _) = evaluate_model(&fresh, &eval_eps, &dc)?;

    let (model, report) = train(&mc, &tc, &train_eps, &eval_eps, &dc, None)?;
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        if i % 4 == 0 || i + 1 == report.epoch_losses.len() {
            println!("epoch {:2}   loss {loss:.4}", i + 1);
        }
    }

    let (trained, _) = evaluate_model(&model, &eval_eps, &dc)?;
    println!("\n{}", trained.format_row("trained"));
    println!("{}", untrained.format_row("untrained"));
    println!("{}", baseline.format_row("random"));

    // the checkpoint carries the config and every parameter; reloading
    // must reproduce the table exactly
    let (reloaded, _) = evaluate_checkpoint(&tc.checkpoint, Some(&mc), &eval_eps, &dc)?;
    assert_eq!(trained.average, reloaded.average);
    println!("\ncheckpoint at {} reproduces the table", tc.checkpoint.display());
    Ok(())
}
