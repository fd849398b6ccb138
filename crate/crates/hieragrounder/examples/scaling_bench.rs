// Why anchors instead of attention over the whole sequence: the encoder's
// cost is linear in video length, a full self-attention baseline is
// quadratic. This example counts FLOPs for both, times real forwards at
// doubling lengths, and fits power laws to all three curves.

use hieragrounder::harness::bench::{attention_flops, encoder_flops, run_bench};
use hieragrounder::harness::config::BenchConfig;
use hieragrounder::Result;

fn main() -> Result<()> {
    let bc = BenchConfig { lengths: vec![512, 1024, 2048, 4096], repeats: 3, ..BenchConfig::default() };

    println!("length   encoder mflop   attention mflop   ratio");
    for &l in &bc.lengths {
        let enc = encoder_flops(&bc, l);
        let att = attention_flops(&bc, l);
        println!(
            "{l:6}   {:13.1}   {:15.1}   {:5.1}x",
            enc as f64 / 1e6,
            att as f64 / 1e6,
            att as f64 / enc as f64
        );
    }

    let report = run_bench(&bc)?;
    println!("\nlength   seconds");
    for p in &report.points {
        println!("{:6}   {:.4}", p.length, p.seconds);
    }
    println!("\nfitted exponents (cost ~ length^e):");
    println!("  encoder flops    e = {:.3}", report.encoder_flop_exponent);
    println!("  attention flops  e = {:.3}", report.attention_flop_exponent);
    println!("  wall time        e = {:.3}", report.time_exponent);
    println!(
        "\nat {} frames the attention baseline needs {:.1}x the encoder's flops",
        bc.lengths.last().unwrap(),
        report.flop_ratio_at_max
    );
    Ok(())
}
