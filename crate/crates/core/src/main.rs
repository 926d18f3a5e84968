use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sarforge::config::{read_kv_file, Manifest};
use sarforge::dataset::{read_dataset, split, write_dataset, Sample, SplitFractions, SplitIndex};
use sarforge::evaluate::{emit_report, encode_pgm, evaluate_split, PerfectPredictor, Predictor};
use sarforge::nn::checkpoint::{load_checkpoint, save_checkpoint};
use sarforge::nn::train::{write_history, TrainConfig};
use sarforge::nn::{train, OptimizerConfig, UNetConfig};
use sarforge::phantom::{FieldStrength, Interval};
use sarforge::pipeline::{generate, GenerateConfig};

#[derive(Parser)]
#[command(name = "sarforge", version, about = "Synthetic local-SAR data generation and U-Net SAR prediction")]
struct Cli {
    /// worker threads for generation and evaluation (overrides SARFORGE_THREADS)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate phantoms across coil placements and write a dataset
    Generate(GenerateArgs),
    /// Train the U-Net on a dataset
    Train(TrainArgs),
    /// Score a checkpoint on the test split
    Evaluate(EvaluateArgs),
    /// Predict the SAR map of one sample
    Predict(PredictArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value = "3T")]
    field: FieldStrength,
    /// grid cells per side
    #[arg(long, default_value_t = 64)]
    grid: usize,
    /// placements along x and y, optionally times phantom seeds: AxB[xS]
    #[arg(long, default_value = "8x8x8")]
    positions: String,
    /// x offset range in meters, MIN:MAX
    #[arg(long, allow_hyphen_values = true)]
    range_x: Option<String>,
    /// y offset range in meters, MIN:MAX
    #[arg(long, allow_hyphen_values = true)]
    range_y: Option<String>,
    /// first phantom seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// key=value file overriding phantom shape and tissue properties
    #[arg(long)]
    phantom_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// sgd-3t, adam-3t, sgd-7t or adam-7t
    #[arg(long, default_value = "adam-3t")]
    preset: String,
    /// run this many epochs, stretching the learning-rate drop period to match
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// initialization, shuffling and split seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 16)]
    base_channels: usize,
    /// output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// trained weights; omit with --perfect-predictor
    #[arg(long, required_unless_present = "perfect_predictor")]
    checkpoint: Option<PathBuf>,
    /// score the ground truth against itself instead of a checkpoint
    #[arg(long)]
    perfect_predictor: bool,
    /// split seed; defaults to the checkpoint's seed (1 without a checkpoint)
    #[arg(long)]
    seed: Option<u64>,
    /// compute metrics on tissue cells only
    #[arg(long)]
    mask_only_metrics: bool,
    /// number of test samples written as PGM triptychs
    #[arg(long, default_value_t = 4)]
    triptychs: usize,
    /// output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// sample index in the dataset
    #[arg(long)]
    sample: usize,
    /// output path prefix; writes <out>.f32, <out>.pgm and <out>.manifest
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn usage(e: impl Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

type CmdResult = Result<(), Failure>;

fn parse_positions(s: &str) -> Result<(usize, usize, usize), Failure> {
    let parts: Vec<&str> = s.split('x').collect();
    let nums: Result<Vec<usize>, _> = parts.iter().map(|p| p.trim().parse::<usize>()).collect();
    match nums.as_deref() {
        Ok([a, b]) => Ok((*a, *b, 1)),
        Ok([a, b, c]) => Ok((*a, *b, *c)),
        _ => Err(usage(format!("--positions expects AxB or AxBxS, got {s:?}"))),
    }
}

fn parse_range(flag: &str, s: &str) -> Result<Interval, Failure> {
    let bad = || usage(format!("{flag} expects MIN:MAX in meters, got {s:?}"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let (min, max) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    let iv = Interval::new(min, max);
    if !iv.is_valid() {
        return Err(bad());
    }
    Ok(iv)
}

fn require_file(flag: &str, p: &Path) -> CmdResult {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{flag}: no such file {}", p.display())))
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_manifest(m: &Manifest, path: &Path) -> CmdResult {
    m.write(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn create_dir(p: &Path) -> CmdResult {
    std::fs::create_dir_all(p).map_err(|e| runtime(format!("{}: {e}", p.display())))
}

fn manifest_for(command: &str, threads: usize) -> Manifest {
    let mut m = Manifest::new();
    m.push("command", command)
        .push("version", env!("CARGO_PKG_VERSION"))
        .push("threads", threads);
    m
}

fn cmd_generate(a: GenerateArgs, threads: usize) -> CmdResult {
    let (nx, ny, seeds) = parse_positions(&a.positions)?;
    let mut cfg = GenerateConfig::new(a.field, a.grid, (nx, ny), seeds, a.seed);
    if let Some(r) = &a.range_x {
        cfg.ranges.x = parse_range("--range-x", r)?;
    }
    if let Some(r) = &a.range_y {
        cfg.ranges.y = parse_range("--range-y", r)?;
    }
    if let Some(p) = &a.phantom_config {
        require_file("--phantom-config", p)?;
        cfg.overrides = read_kv_file(p).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;

    let out = generate(&cfg).map_err(runtime)?;
    write_dataset(&out.samples, &a.out).map_err(runtime)?;
    let mut m = manifest_for("generate", threads);
    cfg.record(&mut m);
    m.push("out", a.out.display())
        .push("candidates", out.candidates)
        .push("outside_coil", out.outside_coil)
        .push("rejected", out.rejected.len())
        .push("built", out.samples.len());
    if let Some(r) = out.mean_peak_to_global() {
        m.push("mean_peak_to_global", r);
    }
    write_manifest(&m, &with_suffix(&a.out, ".manifest"))?;
    println!(
        "{}: {} candidates, {} outside the coil, {} rejected, {} samples written to {}",
        cfg.field,
        out.candidates,
        out.outside_coil,
        out.rejected.len(),
        out.samples.len(),
        a.out.display()
    );
    Ok(())
}

fn load_samples(p: &Path) -> Result<Vec<Sample>, Failure> {
    require_file("--dataset", p)?;
    read_dataset(p).map_err(runtime)
}

fn split_of(samples: &[Sample], seed: u64) -> Result<SplitIndex, Failure> {
    split(samples.len(), SplitFractions::default(), seed).map_err(runtime)
}

fn cmd_train(a: TrainArgs, threads: usize) -> CmdResult {
    let mut opt = OptimizerConfig::preset(&a.preset).ok_or_else(|| {
        usage(format!(
            "unknown preset {:?}; expected one of {}",
            a.preset,
            sarforge::nn::optim::PRESET_NAMES.join(", ")
        ))
    })?;
    if let Some(e) = a.epochs {
        opt = opt.with_epochs(e);
    }
    if let Some(b) = a.batch_size {
        opt = opt.with_batch_size(b);
    }
    opt.validate().map_err(usage)?;
    let arch = UNetConfig {
        depth: a.depth,
        base_channels: a.base_channels,
    };
    arch.validate().map_err(usage)?;
    let samples = load_samples(&a.dataset)?;
    let sp = split_of(&samples, a.seed)?;
    create_dir(&a.out)?;

    let cfg = TrainConfig {
        arch,
        optimizer: opt,
        seed: a.seed,
    };
    let mut m = manifest_for("train", threads);
    m.push("dataset", a.dataset.display())
        .push("preset", &a.preset)
        .push("seed", a.seed)
        .push("depth", arch.depth)
        .push("base_channels", arch.base_channels)
        .push("train_samples", sp.train.len())
        .push("val_samples", sp.val.len())
        .push("test_samples", sp.test.len());
    for (k, v) in opt.describe() {
        m.push(k, v);
    }
    let history_path = a.out.join("history.csv");
    let outcome = match train(&samples, &sp.train, &sp.val, &cfg) {
        Ok(o) => o,
        Err(f) => {
            // keep whatever completed
            write_history(&f.history, &history_path).map_err(runtime)?;
            m.push("status", "diverged");
            write_manifest(&m, &a.out.join("manifest.txt"))?;
            return Err(runtime(f));
        }
    };
    write_history(&outcome.history, &history_path).map_err(runtime)?;
    save_checkpoint(&outcome.best, &a.out.join("best.sarw")).map_err(runtime)?;
    save_checkpoint(&outcome.last, &a.out.join("final.sarw")).map_err(runtime)?;
    m.push("status", "ok").push("best_completed_epochs", outcome.best.epoch);
    if let Some(last) = outcome.history.last() {
        m.push("final_train_rmse", last.train_rmse).push("final_val_rmse", last.val_rmse);
        println!(
            "final train rmse {:.5}, val rmse {:.5} after {} epochs",
            last.train_rmse,
            last.val_rmse,
            outcome.history.len()
        );
    } else {
        println!("no epochs run; checkpoints hold the initialization");
    }
    write_manifest(&m, &a.out.join("manifest.txt"))
}

fn check_shape(samples: &[Sample], arch: &UNetConfig) -> CmdResult {
    let s = &samples[0];
    arch.bottleneck_size(s.height(), s.width()).map_err(|_| {
        runtime(format!(
            "checkpoint (depth {}) needs sides divisible by {}, dataset rasters are {}x{}",
            arch.depth,
            1usize << arch.depth,
            s.width(),
            s.height()
        ))
    })?;
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, threads: usize) -> CmdResult {
    let samples = load_samples(&a.dataset)?;
    let (predictor, seed, source): (Box<dyn Predictor>, u64, String) = match &a.checkpoint {
        Some(p) if !a.perfect_predictor => {
            require_file("--checkpoint", p)?;
            let ck = load_checkpoint(p).map_err(runtime)?;
            check_shape(&samples, &ck.config)?;
            let seed = a.seed.unwrap_or(ck.seed);
            (Box::new(ck.model().map_err(runtime)?), seed, p.display().to_string())
        }
        _ => (Box::new(PerfectPredictor), a.seed.unwrap_or(1), "perfect-predictor".into()),
    };
    let sp = split_of(&samples, seed)?;
    let report = evaluate_split(predictor.as_ref(), &samples, &sp.test, a.mask_only_metrics).map_err(runtime)?;
    let picks: Vec<usize> = sp.test.iter().copied().take(a.triptychs).collect();
    emit_report(&report, &samples, predictor.as_ref(), &picks, &a.out).map_err(runtime)?;

    let mut m = manifest_for("evaluate", threads);
    m.push("dataset", a.dataset.display())
        .push("predictor", source)
        .push("split_seed", seed)
        .push("mask_only_metrics", a.mask_only_metrics)
        .push("test_samples", report.records.len())
        .push("mean_rmse_pct", report.mean_rmse_pct)
        .push("max_rmse_pct", report.max_rmse_pct)
        .push("mean_ssim", report.mean_ssim)
        .push("min_ssim", report.min_ssim)
        .push("banner", if report.passes() { "PASS" } else { "FAIL" });
    write_manifest(&m, &a.out.join("manifest.txt"))?;
    println!("{}", report.banner());
    Ok(())
}

fn cmd_predict(a: PredictArgs, threads: usize) -> CmdResult {
    let samples = load_samples(&a.dataset)?;
    require_file("--checkpoint", &a.checkpoint)?;
    let sample = samples.get(a.sample).ok_or_else(|| {
        runtime(format!(
            "sample {} out of range; dataset holds {}",
            a.sample,
            samples.len()
        ))
    })?;
    let ck = load_checkpoint(&a.checkpoint).map_err(runtime)?;
    check_shape(&samples, &ck.config)?;
    let pred = ck.model().map_err(runtime)?.predict(&sample.input).map_err(runtime)?;
    let clamped = pred.map(|&v| (v as f64).clamp(0.0, 1.0));

    let raw: Vec<u8> = clamped.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    let raw_path = with_suffix(&a.out, ".f32");
    std::fs::write(&raw_path, raw).map_err(|e| runtime(format!("{}: {e}", raw_path.display())))?;
    let pgm_path = with_suffix(&a.out, ".pgm");
    std::fs::write(&pgm_path, encode_pgm(&clamped, 1.0)).map_err(|e| runtime(format!("{}: {e}", pgm_path.display())))?;

    let mut m = manifest_for("predict", threads);
    m.push("dataset", a.dataset.display())
        .push("checkpoint", a.checkpoint.display())
        .push("sample", a.sample)
        .push("width", pred.width())
        .push("height", pred.height())
        .push("norm_factor", sample.meta.norm_factor);
    write_manifest(&m, &with_suffix(&a.out, ".manifest"))?;
    println!("wrote {} and {}", raw_path.display(), pgm_path.display());
    Ok(())
}

fn thread_count(flag: Option<usize>) -> Result<usize, Failure> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("SARFORGE_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| usage(format!("SARFORGE_THREADS must be a positive integer, got {v:?}")))?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err(usage("thread count must be at least 1"));
    }
    Ok(n)
}

fn run(cli: Cli) -> CmdResult {
    let threads = thread_count(cli.threads)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(runtime)?;
    match cli.command {
        Command::Generate(a) => cmd_generate(a, threads),
        Command::Train(a) => cmd_train(a, threads),
        Command::Evaluate(a) => cmd_evaluate(a, threads),
        Command::Predict(a) => cmd_predict(a, threads),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun with --help for usage.");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
