// Central-difference check of every parameter's analytic gradient through
// the full episode loss (scores, offsets, and both contrastive terms).
// The model is tiny so the check finishes in a couple of seconds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hieragrounder::gradcheck::grad_check;
use hieragrounder::harness::train::episode_loss;
use hieragrounder::losses::ContrastiveConfig;
use hieragrounder::model::{GroundingModel, ModelConfig};
use hieragrounder::synthdata::{gen_episode, GenConfig};
use hieragrounder::Result;

fn main() -> Result<()> {
    let mc = ModelConfig {
        d_video: 16,
        d_query: 8,
        dim: 8,
        num_layers: 2,
        d_state: 4,
        window: 3,
        heads: 2,
        text_layers: 1,
        text_heads: 2,
        fusion_heads: 2,
        head_depth: 2,
        contrastive: ContrastiveConfig { proj_dim: 4, margin: 1, ..ContrastiveConfig::default() },
        ..ModelConfig::default()
    };
    let gc = GenConfig {
        l0: 48,
        d_v: 16,
        d_q: 8,
        n_event_classes: 4,
        events_per_episode: 2,
        queries_per_episode: 2,
        ..GenConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = GroundingModel::new(mc, &mut rng)?;
    let ep = gen_episode(&gc, 12)?;
    let params = model.params();

    let report = grad_check(
        || episode_loss(&model, &ep, 12).map(|(loss, _)| loss),
        &params,
        1e-5,
        1e-4,
    )?;
    print!("{}", report.format_table());
    if report.pass() {
        println!("\nall {} parameters match finite differences", report.entries.len());
    } else {
        println!("\n{} parameters FAILED", report.failures().len());
        std::process::exit(2);
    }
    Ok(())
}
