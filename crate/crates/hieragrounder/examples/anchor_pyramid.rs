// Each encoder block plants one learned anchor token in front of every
// stride-sized group of frames, scans the interleaved sequence, then pulls
// the anchors back out as the next level's (shorter) input. Stacking
// blocks yields a feature pyramid whose levels cover the video at
// geometrically coarser resolution. This example walks the interleaving
// bookkeeping, one block, and the full pyramid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hieragrounder::amp::{deinterleave, interleave, AmpBlock, AnchorLayout};
use hieragrounder::model::{GroundingModel, ModelConfig};
use hieragrounder::{Result, Tensor};

fn main() -> Result<()> {
    // ten frames at stride 3 need ceil(10/3) = 4 anchors; each anchor sits
    // directly before the frames it will pool
    let layout = AnchorLayout::new(10, 3)?;
    let mut picture = vec!['.'; layout.l + layout.m];
    for &p in &layout.anchor_positions {
        picture[p] = 'A';
    }
    for &p in &layout.frame_positions {
        picture[p] = 'f';
    }
    println!("layout l=10 s=3    {}", picture.iter().collect::<String>());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frames = Tensor::randn(&[10, 4], &mut rng);
    let anchors = Tensor::randn(&[4, 4], &mut rng);
    let (merged, layout) = interleave(&frames, &anchors, 3)?;
    let (frames_back, anchors_back) = deinterleave(&merged, &layout)?;
    println!(
        "interleave         [{} x 4] + [{} x 4] -> [{} x 4], splits back to [{} x 4] + [{} x 4]",
        frames.rows(),
        anchors.rows(),
        merged.rows(),
        frames_back.rows(),
        anchors_back.rows()
    );

    // one block: refined tokens at the input resolution plus pooled
    // anchors for the level above
    let mc = ModelConfig {
        d_video: 8,
        d_query: 8,
        dim: 16,
        num_layers: 2,
        stride: 4,
        d_state: 8,
        window: 5,
        heads: 2,
        text_layers: 1,
        text_heads: 2,
        fusion_heads: 2,
        ..ModelConfig::default()
    };
    let block = AmpBlock::new(mc.amp_config(), &mut rng)?;
    let x = Tensor::randn(&[32, 16], &mut rng);
    let out = block.forward(&x)?;
    println!(
        "one block          [{} x 16] -> refined [{} x 16], next anchors [{} x 16]",
        x.rows(),
        out.refined.rows(),
        out.next_anchors.rows()
    );

    // the full model chains blocks into a pyramid; level l covers
    // stride^l frames per token and lengths shrink by ceil division
    let mc = ModelConfig { d_video: 8, num_layers: 3, stride: 3, ..mc };
    let model = GroundingModel::new(mc, &mut rng)?;
    let video = Tensor::randn(&[53, mc.d_video], &mut rng);
    let query = Tensor::randn(&[3, mc.d_query], &mut rng);
    let out = model.forward(&video, &query)?;
    println!("\npyramid over 53 frames at stride 3:");
    for (i, level) in out.pyramid.levels.iter().enumerate() {
        println!(
            "  level {i}   {:3} tokens   {} frames per token   scores [{} x 1]   offsets [{} x 2]",
            level.refined.rows(),
            level.effective_stride,
            out.scores[i].rows(),
            out.offsets[i].rows()
        );
    }
    Ok(())
}
