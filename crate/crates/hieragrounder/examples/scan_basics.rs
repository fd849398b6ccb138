// A selective scan layer walks a sequence once, left to right, carrying a
// small recurrent state per channel. The input itself decides, step by
// step, how much enters the state and how fast old content decays, which
// is what separates it from a fixed convolution. Cost is linear in
// sequence length; this example shows the forward shapes, the
// bidirectional wrapper, and the timing curve.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hieragrounder::ssm::{BidiScan, ScanConfig, SelectiveLayer};
use hieragrounder::{no_grad, Result, Tensor};

fn main() -> Result<()> {
    let cfg = ScanConfig { d_in: 16, d_out: 16, d_state: 8, d_conv: 3, expand: 2, zoh: false };
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let layer = SelectiveLayer::new(cfg, &mut rng)?;
    let out_proj = SelectiveLayer::out_proj(cfg, &mut rng);
    let x = Tensor::randn(&[24, cfg.d_in], &mut rng);
    let y = layer.forward(&x, &out_proj)?;
    println!("one layer          [{} x {}] -> [{} x {}]", x.rows(), cfg.d_in, y.rows(), cfg.d_out);

    // a forward pass only sees the past; the bidirectional wrapper runs a
    // second scan over the reversed sequence and sums both, so every
    // position gets context from both sides
    let uni = BidiScan::new(cfg, false, &mut rng)?;
    let bidi = BidiScan::new(cfg, true, &mut rng)?;
    let yu = uni.forward(&x)?;
    let yb = bidi.forward(&x)?;
    println!("unidirectional     [{} x {}]", yu.rows(), cfg.d_out);
    println!("bidirectional      [{} x {}]", yb.rows(), cfg.d_out);

    // doubling the length should roughly double the time
    println!("\nlength   seconds     ratio");
    let mut prev: Option<f64> = None;
    for t in [1024usize, 2048, 4096, 8192] {
        let x = Tensor::randn(&[t, cfg.d_in], &mut rng);
        no_grad(|| bidi.forward(&x).map(|_| ()))?; // warm up
        let reps = 3;
        let start = Instant::now();
        for _ in 0..reps {
            no_grad(|| bidi.forward(&x).map(|_| ()))?;
        }
        let secs = start.elapsed().as_secs_f64() / reps as f64;
        match prev {
            Some(p) => println!("{t:6}   {secs:.4}      {:.2}x", secs / p),
            None => println!("{t:6}   {secs:.4}"),
        }
        prev = Some(secs);
    }
    Ok(())
}
