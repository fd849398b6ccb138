//! Subcommand front end. Every command takes the same three flags: a TOML
//! run config (defaults apply when omitted), a seed override, and an output
//! location. Numeric failures exit with code 2, everything else with 1.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decode::write_predictions;
use crate::error::{Error, Result};
use crate::gradcheck::grad_check;
use crate::harness::ablate::{ablate, format_table};
use crate::harness::bench::{run_bench, write_report};
use crate::harness::config::RunConfig;
use crate::harness::evaluate::{evaluate_checkpoint, random_baseline};
use crate::harness::train::{episode_loss, train};
use crate::model::GroundingModel;
use crate::synthdata::{gen_dataset, read_dataset, write_dataset, Episode, Query};
use crate::tensor::Tensor;

#[derive(Parser, Debug)]
#[command(name = "hieragrounder", version, about = "temporal grounding on synthetic long videos")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Args, Debug)]
pub struct Common {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (bench: output file).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate train and eval episode files.
    GenData(Common),
    /// Train a grounding model on generated episodes.
    Train(Common),
    /// Score a checkpoint on the eval split.
    Eval(Common),
    /// Train and score the whole ablation matrix.
    Ablate(Common),
    /// Compare analytic gradients against finite differences.
    Gradcheck(Common),
    /// FLOPs and wall-time scaling curves.
    Bench(Common),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(c) => gen_data_cmd(&c),
        Cmd::Train(c) => train_cmd(&c),
        Cmd::Eval(c) => eval_cmd(&c),
        Cmd::Ablate(c) => ablate_cmd(&c),
        Cmd::Gradcheck(c) => gradcheck_cmd(&c),
        Cmd::Bench(c) => bench_cmd(&c),
    }
}

fn load(c: &Common) -> Result<RunConfig> {
    RunConfig::load_or_default(c.config.as_deref())
}

fn gen_data_cmd(c: &Common) -> Result<()> {
    let cfg = load(c)?;
    let seed = c.seed.unwrap_or(cfg.train.seed);
    let dir = c.out.clone().unwrap_or_else(|| cfg.train.data_dir.clone());
    fs::create_dir_all(&dir)?;
    let train_eps = gen_dataset(&cfg.data.gen, seed, cfg.data.train_episodes)?;
    // Disjoint seed range keeps the eval split independent of the train split.
    let eval_eps = gen_dataset(&cfg.data.gen, seed + 1_000_000, cfg.data.eval_episodes)?;
    write_dataset(&dir.join("train.hgd"), &cfg.data.gen, &train_eps)?;
    write_dataset(&dir.join("eval.hgd"), &cfg.data.gen, &eval_eps)?;
    println!(
        "wrote {} train and {} eval episodes to {}",
        train_eps.len(),
        eval_eps.len(),
        dir.display()
    );
    Ok(())
}

fn check_widths(cfg: &RunConfig, gen: &crate::synthdata::GenConfig) -> Result<()> {
    if gen.d_v != cfg.model.d_video || gen.d_q != cfg.model.d_query {
        return Err(Error::Config(format!(
            "dataset carries video/query widths {}/{}, model expects {}/{}",
            gen.d_v, gen.d_q, cfg.model.d_video, cfg.model.d_query
        )));
    }
    Ok(())
}

fn train_cmd(c: &Common) -> Result<()> {
    let cfg = load(c)?;
    let mut tc = cfg.train.clone();
    if let Some(s) = c.seed {
        tc.seed = s;
    }
    let (gen_cfg, train_eps) = read_dataset(&tc.data_dir.join("train.hgd"))?;
    let (_, eval_eps) = read_dataset(&tc.data_dir.join("eval.hgd"))?;
    check_widths(&cfg, &gen_cfg)?;

    let mut trace_file = None;
    if let Some(dir) = &c.out {
        fs::create_dir_all(dir)?;
        tc.checkpoint = dir.join("model.hgck");
        trace_file = Some(BufWriter::new(File::create(dir.join("trace.jsonl"))?));
    }
    let trace_ref = trace_file.as_mut().map(|f| f as &mut dyn Write);
    let (_, report) = train(&cfg.model, &tc, &train_eps, &eval_eps, &cfg.decode, trace_ref)?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}  mean loss {l:.6}", e + 1);
    }
    if let Some(r) = report.trace.iter().rev().find_map(|r| r.eval_avg_recall) {
        println!("final held-out avg recall {r:.4}");
    }
    println!("saved checkpoint to {}", tc.checkpoint.display());
    Ok(())
}

fn eval_cmd(c: &Common) -> Result<()> {
    let cfg = load(c)?;
    let (gen_cfg, eval_eps) = read_dataset(&cfg.train.data_dir.join("eval.hgd"))?;
    // Only enforce the model section when the user actually supplied one;
    // without a config the checkpoint's own stored config wins.
    let expected = c.config.is_some().then_some(&cfg.model);
    let (table, records) = evaluate_checkpoint(&cfg.train.checkpoint, expected, &eval_eps, &cfg.decode)?;

    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out)?;
    serde_json::to_writer_pretty(File::create(out.join("recall.json"))?, &table)
        .map_err(|e| Error::Format(format!("recall table: {e}")))?;
    let mut w = BufWriter::new(File::create(out.join("predictions.jsonl"))?);
    write_predictions(&mut w, &records)?;

    println!("{}", table.format_row("model"));
    let gts: Vec<(f64, f64)> =
        eval_eps.iter().flat_map(|e| e.queries.iter().map(|q| q.gt)).collect();
    let baseline = random_baseline(&gts, gen_cfg.l0, 1000, c.seed.unwrap_or(0))?;
    println!("{}", baseline.format_row("random"));
    Ok(())
}

fn ablate_cmd(c: &Common) -> Result<()> {
    let cfg = load(c)?;
    let s = c.seed.unwrap_or(cfg.train.seed);
    let seeds = [s, s + 1, s + 2];
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("out/ablate"));
    fs::create_dir_all(&out)?;
    let rows = ablate(&cfg.model, &cfg.train, &cfg.data, &cfg.decode, &seeds, &out)?;
    let table = format_table(&rows);
    fs::write(out.join("table.txt"), &table)?;
    let mut w = BufWriter::new(File::create(out.join("rows.jsonl"))?);
    for r in &rows {
        let line =
            serde_json::to_string(r).map_err(|e| Error::Format(format!("ablation row: {e}")))?;
        writeln!(w, "{line}")?;
    }
    print!("{table}");
    Ok(())
}

fn gradcheck_cmd(c: &Common) -> Result<()> {
    let cfg = load(c)?;
    let seed = c.seed.unwrap_or(11);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = GroundingModel::new(cfg.model, &mut rng)?;

    // A short synthetic episode keeps the finite differencing cheap while
    // still flowing through every parameter.
    let l0 = (2 * cfg.model.stride.pow(cfg.model.num_layers as u32 - 1)).max(12);
    let ep = Episode {
        features: Tensor::randn(&[l0, cfg.model.d_video], &mut rng),
        queries: vec![Query {
            embedding: Tensor::randn(&[3, cfg.model.d_query], &mut rng),
            gt: (l0 as f64 / 4.0, l0 as f64 / 2.0),
            class: 0,
        }],
        events: vec![],
        seed,
    };
    let params = model.params();
    let report =
        grad_check(|| episode_loss(&model, &ep, seed).map(|(l, _)| l), &params, 1e-5, 1e-4)?;
    print!("{}", report.format_table());
    if let Some(out) = &c.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("gradcheck.txt"), report.format_table())?;
    }
    if !report.pass() {
        return Err(Error::Config(format!(
            "gradient check failed for {} parameter(s)",
            report.failures().len()
        )));
    }
    println!("all {} parameters match finite differences", report.entries.len());
    Ok(())
}

fn bench_cmd(c: &Common) -> Result<()> {
    let cfg = load(c)?;
    let report = run_bench(&cfg.bench)?;
    for p in &report.points {
        println!(
            "L {:>6}  encoder {:>15} flops  attention {:>15} flops  {:>9.4} s",
            p.length, p.encoder_flops, p.attention_flops, p.seconds
        );
    }
    println!(
        "time exponent {:.3}; flop exponents encoder {:.3} / attention {:.3}; ratio at max {:.2}x",
        report.time_exponent,
        report.encoder_flop_exponent,
        report.attention_flop_exponent,
        report.flop_ratio_at_max
    );
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("out/bench.jsonl"));
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(&out)?);
    write_report(&mut w, &report)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{DataConfig, TrainConfig};
    use crate::harness::testutil::{tiny_gen, tiny_model};

    fn tiny_run_config(dir: &std::path::Path) -> RunConfig {
        RunConfig {
            model: tiny_model(),
            train: TrainConfig {
                epochs: 1,
                warmup_steps: 2,
                lr: 3e-3,
                checkpoint: dir.join("out/model.hgck"),
                data_dir: dir.join("data"),
                ..TrainConfig::default()
            },
            data: DataConfig { gen: tiny_gen(), train_episodes: 2, eval_episodes: 1 },
            ..RunConfig::default()
        }
    }

    #[test]
    fn flags_parse_into_the_right_places() {
        let cli = Cli::try_parse_from([
            "hieragrounder", "gen-data", "--seed", "7", "--out", "somewhere",
        ])
        .unwrap();
        match cli.cmd {
            Cmd::GenData(c) => {
                assert_eq!(c.seed, Some(7));
                assert_eq!(c.out, Some(PathBuf::from("somewhere")));
                assert!(c.config.is_none());
            }
            _ => panic!("parsed into the wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["hieragrounder", "no-such-command"]).is_err());
        assert!(Cli::try_parse_from(["hieragrounder", "train", "--seed", "-1"]).is_err());
    }

    #[test]
    fn gen_train_eval_chain_produces_all_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());
        let cfg_path = dir.path().join("run.toml");
        std::fs::write(&cfg_path, toml::to_string(&cfg).unwrap()).unwrap();
        let common = |out: Option<PathBuf>| Common {
            config: Some(cfg_path.clone()),
            seed: None,
            out,
        };

        run(Cli { cmd: Cmd::GenData(common(None)) }).unwrap();
        assert!(cfg.train.data_dir.join("train.hgd").exists());
        assert!(cfg.train.data_dir.join("eval.hgd").exists());

        run(Cli { cmd: Cmd::Train(common(Some(dir.path().join("out")))) }).unwrap();
        assert!(cfg.train.checkpoint.exists());
        let trace = std::fs::read_to_string(dir.path().join("out/trace.jsonl")).unwrap();
        assert!(trace.lines().count() >= 1);

        run(Cli { cmd: Cmd::Eval(common(Some(dir.path().join("eval_out")))) }).unwrap();
        let recall = std::fs::read_to_string(dir.path().join("eval_out/recall.json")).unwrap();
        let table: crate::decode::RecallTable = serde_json::from_str(&recall).unwrap();
        assert!(table.average >= 0.0 && table.average <= 1.0);
        assert!(dir.path().join("eval_out/predictions.jsonl").exists());
    }

    #[test]
    fn eval_without_data_reports_a_config_or_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());
        let cfg_path = dir.path().join("run.toml");
        std::fs::write(&cfg_path, toml::to_string(&cfg).unwrap()).unwrap();
        let err = run(Cli {
            cmd: Cmd::Eval(Common { config: Some(cfg_path), seed: None, out: None }),
        })
        .unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn bench_writes_one_line_per_length_plus_summary() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run_config(dir.path());
        cfg.bench.lengths = vec![16, 32, 48, 64];
        cfg.bench.repeats = 1;
        cfg.bench.dim = 8;
        cfg.bench.layers = 1;
        cfg.bench.d_state = 4;
        cfg.bench.window = 3;
        cfg.bench.heads = 2;
        let cfg_path = dir.path().join("run.toml");
        std::fs::write(&cfg_path, toml::to_string(&cfg).unwrap()).unwrap();
        let out = dir.path().join("bench.jsonl");
        run(Cli {
            cmd: Cmd::Bench(Common {
                config: Some(cfg_path),
                seed: None,
                out: Some(out.clone()),
            }),
        })
        .unwrap();
        let text = std::fs::read_to_string(out).unwrap();
        assert_eq!(text.lines().count(), 5);
    }
}
