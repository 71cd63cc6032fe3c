//! `fasl` — train, evaluate, and inspect FASL-Seg segmentation models.
//!
//! One command per process; every command that produces files owns a single
//! output directory with a `manifest.txt` describing the run. Exit codes:
//! 0 success, 2 configuration/usage error, 3 data error, 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fasl_core::config::RunConfig;
use fasl_core::metrics::DiceVariant;
use fasl_core::runner::{
    run_ablate, run_eval, run_info, run_synth, run_train, AblateOptions, DataSource, EvalOptions,
    SynthOptions, TrainOptions,
};
use fasl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fasl", version, about = "FASL-Seg semantic segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, a training log, and a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint; writes per-class IoU/Dice/FPR tables.
    Eval(EvalArgs),
    /// Train several ablation rows and write a comparison table.
    Ablate(AblateArgs),
    /// Print parameter counts and a multiply-accumulate estimate.
    Info(InfoArgs),
    /// Generate a synthetic dataset on disk.
    Synth(SynthArgs),
}

/// Configuration sources, shared by train/ablate/info.
#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (`key = value` lines); defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Shorthand for `--set model.preset=<PRESET>`.
    #[arg(long, value_parser = ["toy", "small", "full"])]
    preset: Option<String>,
    /// Shorthand for `--set train.seed=<SEED>`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a single key, e.g. `--set train.lr=0.001`. Repeatable;
    /// later overrides win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?,
            None => String::new(),
        };
        let mut overrides = Vec::new();
        if let Some(p) = &self.preset {
            overrides.push(("model.preset".to_string(), p.clone()));
        }
        if let Some(s) = self.seed {
            overrides.push(("train.seed".to_string(), s.to_string()));
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set {kv:?}: expected KEY=VALUE"))
            })?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        RunConfig::parse_with(&text, &overrides)
    }
}

/// Where samples come from: a dataset directory or the built-in generator.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct DataArgs {
    /// Dataset directory (`images/`, `masks/`, optional `classes.txt`).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Use generated scenes instead of on-disk data (see the `data.*` keys).
    #[arg(long)]
    synthetic: bool,
}

impl DataArgs {
    fn source(&self) -> DataSource<'_> {
        match &self.data {
            Some(dir) => DataSource::Dir(dir),
            None => DataSource::Synthetic,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Continue from `<out>/last.ckpt` (requires an identical config).
    #[arg(long)]
    resume: bool,
    /// Stop after this many optimizer steps (smoke runs; not part of the config).
    #[arg(long, value_name = "N")]
    max_steps: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate; its embedded config drives the model.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Dice denominator form: `standard` or `as_printed`.
    #[arg(long, default_value = "standard")]
    dice_variant: String,
    /// Score the ground truth against itself (pipeline sanity check).
    #[arg(long)]
    oracle: bool,
    /// Write prediction overlays to `<out>/overlays/`.
    #[arg(long)]
    overlay: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory (one subdirectory per row).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Comma-separated rows, e.g. `Model-1,Model-9`; omit for the full matrix.
    #[arg(long, value_delimiter = ',', value_name = "ROWS")]
    rows: Vec<String>,
    /// Per-row cap on optimizer steps (smoke runs).
    #[arg(long, value_name = "N")]
    max_steps: Option<u64>,
}

#[derive(Args)]
struct InfoArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Square input size for the multiply-accumulate estimate.
    #[arg(long, default_value_t = 512, value_name = "PIXELS")]
    input_size: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 16, value_name = "N")]
    count: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 128, value_name = "PIXELS")]
    size: usize,
    /// Number of classes including background.
    #[arg(long, default_value_t = 4, value_name = "N")]
    classes: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let report = run_train(&TrainOptions {
                config: a.config.load()?,
                data: a.data.source(),
                out_dir: &a.out,
                resume: a.resume,
                max_steps: a.max_steps,
            })?;
            println!(
                "trained {} epoch(s), {} step(s) total; best mIoU {:.4} at epoch {}",
                report.rows.len(),
                report.steps,
                report.best_miou,
                report.best_epoch
            );
            println!("artifacts in {}", a.out.display());
        }
        Command::Eval(a) => {
            let outcome = run_eval(&EvalOptions {
                checkpoint: &a.checkpoint,
                data: a.data.source(),
                out_dir: &a.out,
                dice_variant: DiceVariant::parse(&a.dice_variant)?,
                oracle: a.oracle,
                overlay: a.overlay,
            })?;
            print!("{}", outcome.report_text);
            println!("report in {}", a.out.display());
        }
        Command::Ablate(a) => {
            let rows = a.rows.iter().map(|r| r.trim().to_string()).collect();
            let results = run_ablate(&AblateOptions {
                config: a.config.load()?,
                rows,
                data: a.data.source(),
                out_dir: &a.out,
                max_steps: a.max_steps,
            })?;
            println!("{:<10}  {:>12}  {:>8}  {:>8}", "row", "params", "miou", "dice");
            for r in &results {
                println!("{:<10}  {:>12}  {:>8.4}  {:>8.4}", r.row, r.params, r.miou, r.dice);
            }
            println!("summary in {}", a.out.display());
        }
        Command::Info(a) => {
            let cfg = a.config.load()?;
            print!("{}", run_info(&cfg, (a.input_size, a.input_size))?);
        }
        Command::Synth(a) => {
            run_synth(&SynthOptions {
                out_dir: &a.out,
                count: a.count,
                size: a.size,
                num_classes: a.classes,
                seed: a.seed,
            })?;
            println!("wrote {} sample(s) to {}", a.count, a.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
