//! `homonet` command line.
//!
//! Every subcommand takes `--out DIR` and writes `effective_config.cfg` (the
//! full configuration, enough to rerun) and `result.json` there. Exit codes:
//! 0 success, 1 usage or configuration error, 2 runtime failure.

use crate::config::Config;
use crate::datagen::{generate_duals, read_dataset, write_dataset, Dataset, GenConfig, SamplePair, SourcePool};
use crate::error::{Error, Result};
use crate::evaluation::{
    ablation_table, dual_agreement, evaluate, evaluate_dataset, read_pair_dir, spearman, sweep, viz_cost_volume,
    write_sweep_plot, DatasetDescriptor, ModelPredictor, OraclePredictor, Predictor, SweepAxis, ZeroPredictor,
    REPORT_JSON,
};
use crate::network::{
    load_checkpoint, DenoiserConfig, EstimatorConfig, ExtractorConfig, Model, ModelConfig, ModelVariant,
};
use crate::parallel;
use crate::training::{model_gradcheck, train, Batch, LossMode, LossWeights, TrainConfig};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const SNAPSHOT_FILE: &str = "effective_config.cfg";
pub const RESULT_FILE: &str = "result.json";

pub const SYNOPSIS: &str = "\
usage: homonet <COMMAND> --out DIR [--config FILE] [--seed N] [--deterministic] [KEY=VALUE ...]

commands:
  gen        generate a dual-sample dataset into DIR
  train      train a model on train.data
  eval       score a predictor on eval.data or eval.pairs (--oracle for ground truth)
  sweep      MACE against one generation parameter
  ablate     train FH, FMH, FMRH-s, FMRH-ss and tabulate held-out MACE
  viz        render the cost volume and its cleaned version for one sample
  gradcheck  finite-difference check of the training gradients";

#[derive(Parser, Debug)]
#[command(name = "homonet", version, about = "Cost-volume homography estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    Gen(RunArgs),
    Train(RunArgs),
    Eval(EvalArgs),
    Sweep(EvalArgs),
    Ablate(RunArgs),
    Viz(RunArgs),
    Gradcheck(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Flat `key = value` file; later overrides win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; nothing is written outside it.
    #[arg(long)]
    out: PathBuf,
    /// Seed for the command's random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded execution.
    #[arg(long)]
    deterministic: bool,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Predict the ground truth (harness sanity check).
    #[arg(long)]
    oracle: bool,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Ablate(_) => "ablate",
            Command::Viz(_) => "viz",
            Command::Gradcheck(_) => "gradcheck",
        }
    }

    fn args(&self) -> (&RunArgs, bool) {
        match self {
            Command::Eval(a) | Command::Sweep(a) => (&a.run, a.oracle),
            Command::Gen(r) | Command::Train(r) | Command::Ablate(r) | Command::Viz(r) | Command::Gradcheck(r) => {
                (r, false)
            }
        }
    }

    fn seed_key(&self) -> &'static str {
        match self {
            Command::Train(_) | Command::Ablate(_) => "train.seed",
            Command::Gradcheck(_) => "gradcheck.seed",
            _ => "gen.global_seed",
        }
    }
}

fn effective_config(cmd: &Command) -> Result<Config> {
    let (args, oracle) = cmd.args();
    let mut cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    // Explicit key=value overrides win over --seed.
    if let Some(seed) = args.seed {
        cfg.set(cmd.seed_key(), &seed.to_string())?;
    }
    for o in args.set.iter().chain(&args.overrides) {
        cfg.set_override(o)?;
    }
    if args.deterministic {
        cfg.set("run.deterministic", "true")?;
    }
    if oracle {
        cfg.set("eval.predictor", "oracle")?;
    }
    Ok(cfg)
}

fn usage_error(msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}\n\n{SYNOPSIS}");
    1
}

pub fn main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    eprintln!("\n{SYNOPSIS}");
                    1
                }
            }
        }
    };
    let cmd = cli.command;
    let cfg = match effective_config(&cmd) {
        Ok(cfg) => cfg,
        Err(e) => return usage_error(e),
    };
    let out = cmd.args().0.out.clone();
    let deterministic = cfg.flag("run.deterministic");
    if deterministic {
        parallel::force_sequential(true);
    }
    let code = execute(&cmd, &cfg, &out);
    if deterministic {
        parallel::force_sequential(false);
    }
    code
}

fn execute(cmd: &Command, cfg: &Config, out: &Path) -> i32 {
    let name = cmd.name();
    let snapshot = format!("# homonet {name}\n{}", cfg.snapshot());
    if let Err(e) = std::fs::create_dir_all(out).and_then(|_| std::fs::write(out.join(SNAPSHOT_FILE), snapshot)) {
        eprintln!("error: cannot write to {}: {e}", out.display());
        return 2;
    }
    let started = Instant::now();
    let outcome = match cmd {
        Command::Gen(_) => run_gen(cfg, out),
        Command::Train(_) => run_train(cfg, out),
        Command::Eval(_) => run_eval(cfg, out),
        Command::Sweep(_) => run_sweep(cfg, out),
        Command::Ablate(_) => run_ablate(cfg, out),
        Command::Viz(_) => run_viz(cfg, out),
        Command::Gradcheck(_) => run_gradcheck(cfg, out),
    };
    let (code, body) = match outcome {
        Ok(result) => {
            let passed = result.get("pass").and_then(Value::as_bool).unwrap_or(true);
            let status = if passed { "ok" } else { "failed" };
            (if passed { 0 } else { 2 }, json!({ "command": name, "status": status, "result": result }))
        }
        Err(Error::Config(msg)) => {
            let body = json!({ "command": name, "status": "usage_error", "error": msg });
            (usage_error(msg), body)
        }
        Err(e) => {
            eprintln!("error: {e}");
            (2, json!({ "command": name, "status": "error", "error": e.to_string() }))
        }
    };
    let text = serde_json::to_string_pretty(&body).expect("json values serialize");
    if let Err(e) = std::fs::write(out.join(RESULT_FILE), text + "\n") {
        eprintln!("error: cannot write result: {e}");
        return 2;
    }
    println!("{name}: {} in {:.1}s", body["status"].as_str().unwrap_or("?"), started.elapsed().as_secs_f64());
    code
}

fn required(cfg: &Config, key: &str) -> Result<PathBuf> {
    cfg.path(key).ok_or_else(|| Error::Config(format!("{key} is required")))
}

fn source_pool(cfg: &Config, gen: &GenConfig) -> Result<SourcePool> {
    match cfg.path("gen.source_dir") {
        Some(dir) => SourcePool::from_dir(&dir),
        None => Ok(SourcePool::procedural(cfg.usize("gen.sources"), gen.source_size(), cfg.uint("gen.source_seed"))),
    }
}

fn run_gen(cfg: &Config, out: &Path) -> Result<Value> {
    let gen = cfg.gen_config()?;
    let pool = source_pool(cfg, &gen)?;
    let first = cfg.uint("gen.first_id");
    let count = cfg.uint("gen.count");
    let samples = generate_duals(&pool, &gen, first..first + count)?;
    write_dataset(&samples, &gen, out)?;
    println!("wrote {count} dual samples ({0}x{0}, rho {1}) from {2} sources", gen.image_size, gen.rho, pool.len());
    Ok(json!({ "count": count, "first_id": first, "sources": pool.len(), "config": gen }))
}

fn load_training_data(cfg: &Config) -> Result<Dataset> {
    let dir = required(cfg, "train.data")?;
    let data = read_dataset(&dir)?;
    if data.samples.is_empty() {
        return Err(Error::DatasetMissing(dir));
    }
    Ok(data)
}

fn run_train(cfg: &Config, out: &Path) -> Result<Value> {
    let data = load_training_data(cfg)?;
    let tc = cfg.train_config(data.header.config.image_size as usize)?;
    println!("training {} for {} steps on {} samples", tc.label(), tc.steps, data.samples.len());
    let o = train(&tc, &data, out)?;
    println!("held-out MACE: untrained {:.4}, final {:?}, best {:?}", o.untrained_mace, o.final_mace, o.best_mace);
    Ok(json!({
        "label": o.label,
        "steps": tc.steps,
        "train_samples": data.samples.len() - tc.holdout,
        "heldout_samples": tc.holdout,
        "untrained_mace": o.untrained_mace,
        "best_mace": o.best_mace,
        "final_mace": o.final_mace,
        "initial_checkpoint": o.initial_checkpoint,
        "best_checkpoint": o.best_checkpoint,
        "final_checkpoint": o.final_checkpoint,
    }))
}

fn predictor(cfg: &Config) -> Result<Box<dyn Predictor>> {
    Ok(match cfg.get("eval.predictor") {
        "oracle" => Box::new(OraclePredictor),
        "identity" => Box::new(ZeroPredictor),
        _ => Box::new(ModelPredictor::load(&required(cfg, "eval.checkpoint")?)?),
    })
}

fn run_eval(cfg: &Config, out: &Path) -> Result<Value> {
    let p = predictor(cfg)?;
    let report = match (cfg.path("eval.data"), cfg.path("eval.pairs")) {
        (Some(dir), None) => evaluate_dataset(&*p, &read_dataset(&dir)?, &dir.display().to_string())?,
        (None, Some(dir)) => {
            let pairs = read_pair_dir(&dir)?;
            let refs: Vec<&SamplePair> = pairs.iter().map(|(_, p)| p).collect();
            let size = refs.first().ok_or_else(|| Error::DatasetMissing(dir.clone()))?.image_a.width() as usize;
            let desc = DatasetDescriptor { description: dir.display().to_string(), image_size: size, generator: None };
            evaluate(&*p, &refs, desc)?
        }
        _ => return Err(Error::Config("set exactly one of eval.data and eval.pairs".into())),
    };
    report.write(out)?;
    println!("{} ({}): MACE {:.4} over {} pairs", report.label, report.checkpoint_id, report.mace, report.count);
    Ok(json!({
        "checkpoint_id": report.checkpoint_id,
        "label": report.label,
        "count": report.count,
        "mace": report.mace,
        "report": REPORT_JSON,
    }))
}

fn run_sweep(cfg: &Config, out: &Path) -> Result<Value> {
    let p = predictor(cfg)?;
    let base = cfg.gen_config()?;
    if let Some(size) = p.image_size().filter(|&s| s != base.image_size as usize) {
        return Err(Error::SizeMismatch { expected: size, found: base.image_size as usize });
    }
    let axis: SweepAxis = cfg.get("sweep.axis").parse()?;
    let values = cfg.floats("sweep.values");
    let pool = source_pool(cfg, &base)?;
    let report = sweep(&*p, &pool, &base, cfg.uint("sweep.count"), axis, &values)?;
    report.write(out)?;
    let (png, csv) = write_sweep_plot(&report, out)?;
    let points = &report.sweep.as_ref().expect("sweep report").points;
    for pt in points {
        println!("{axis} = {:>6}: MACE {:.4}", pt.value, pt.mace);
    }
    let maces: Vec<f64> = points.iter().map(|pt| pt.mace).collect();
    Ok(json!({
        "axis": axis,
        "points": points,
        "mace": report.mace,
        "spearman": spearman(&values, &maces),
        "plot": png.file_name().map(|f| f.to_string_lossy().into_owned()),
        "table": csv.file_name().map(|f| f.to_string_lossy().into_owned()),
    }))
}

fn run_ablate(cfg: &Config, out: &Path) -> Result<Value> {
    let data = load_training_data(cfg)?;
    let base = cfg.train_config(data.header.config.image_size as usize)?;
    let runs = [
        (ModelVariant::FH, LossMode::Supervised),
        (ModelVariant::FMH, LossMode::Supervised),
        (ModelVariant::FMRH, LossMode::Supervised),
        (ModelVariant::FMRH, LossMode::Combined),
    ];
    let mut predictors = Vec::new();
    let mut trained = Vec::new();
    for (variant, mode) in runs {
        let tc = TrainConfig { model: ModelConfig { variant, ..base.model.clone() }, loss_mode: mode, ..base.clone() };
        let label = tc.label();
        println!("training {label}");
        let o = train(&tc, &data, &out.join("runs").join(&label))?;
        let ckpt = o.final_checkpoint.clone().unwrap_or_else(|| o.initial_checkpoint.clone());
        trained.push(json!({ "label": label, "checkpoint": ckpt, "untrained_mace": o.untrained_mace }));
        predictors.push(ModelPredictor::load(&ckpt)?);
    }
    let held = &data.samples[data.samples.len() - base.holdout..];
    let pairs: Vec<&SamplePair> = held.iter().map(|s| &s.pair_ab).collect();
    let refs: Vec<&dyn Predictor> = predictors.iter().map(|p| p as &dyn Predictor).collect();
    let table = ablation_table(&refs, &pairs)?;
    std::fs::write(out.join("ablation.csv"), table.csv())?;
    std::fs::write(out.join("ablation.txt"), table.text())?;
    print!("{}", table.text());
    Ok(json!({ "count": table.count, "rows": table.rows, "runs": trained }))
}

fn run_viz(cfg: &Config, out: &Path) -> Result<Value> {
    let (model, meta) = load_checkpoint(&required(cfg, "eval.checkpoint")?)?;
    let data = read_dataset(&required(cfg, "viz.data")?)?;
    let id = cfg.uint("viz.sample");
    let s = data
        .samples
        .iter()
        .find(|s| s.sample_id() == id)
        .ok_or_else(|| Error::Config(format!("viz.sample: no sample with id {id}")))?;
    let mut images = viz_cost_volume(&model, &s.pair_ab, out, &format!("sample{id}_ab"))?.to_vec();
    let mut agreement = None;
    if cfg.flag("viz.dual") {
        images.extend(viz_cost_volume(&model, &s.pair_cd, out, &format!("sample{id}_cd"))?);
        agreement = dual_agreement(&model, &[(&s.pair_ab, &s.pair_cd)])?.pop();
    }
    let names: Vec<String> =
        images.iter().filter_map(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned()).collect();
    println!("wrote {}", names.join(", "));
    Ok(json!({ "checkpoint_id": meta.id, "sample_id": id, "images": names, "dual_agreement": agreement }))
}

fn run_gradcheck(cfg: &Config, _out: &Path) -> Result<Value> {
    let size = cfg.usize("gradcheck.image_size");
    let width = cfg.usize("gradcheck.width");
    let seed = cfg.uint("gradcheck.seed");
    let mc = ModelConfig {
        variant: ModelVariant::FMRH,
        image_size: size,
        extractor: ExtractorConfig {
            stem_width: width,
            widths: [width, width],
            blocks: [1, 1],
            normalize: cfg.flag("model.extractor.normalize"),
        },
        denoiser: DenoiserConfig { base: Some(width), channels: vec![1, 2], ..Default::default() },
        estimator: EstimatorConfig { hidden: cfg.usize("gradcheck.hidden"), pool_to: None },
    };
    mc.validate()?;
    let gen = GenConfig { image_size: size as u32, rho: size as f64 / 4.0, global_seed: seed, ..Default::default() };
    let pool = SourcePool::procedural(4, gen.source_size(), seed);
    let duals = generate_duals(&pool, &gen, 0..cfg.uint("gradcheck.batch"))?;
    let batch = Batch::<f64>::from_duals(&duals.iter().collect::<Vec<_>>())?;
    let model = Model::<f64>::new(mc, seed)?;
    let weights = LossWeights { lambda1: cfg.float("train.lambda1"), lambda2: cfg.float("train.lambda2") };
    let want = cfg.usize("gradcheck.samples");
    let tolerance = cfg.float("gradcheck.tolerance");
    let r = model_gradcheck(&model, &batch, LossMode::Combined, weights, want, seed)?;
    let pass = r.checked >= want && r.max_rel_error < tolerance;
    println!(
        "max relative error {:.3e} over {} parameters ({} rejected at kinks); tolerance {tolerance:e}",
        r.max_rel_error, r.checked, r.rejected_at_kinks
    );
    Ok(json!({ "pass": pass, "tolerance": tolerance, "report": r }))
}
