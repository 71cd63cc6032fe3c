//! Command implementations behind the CLI: train, eval, ablate, info, and
//! synthetic-dataset export.
//!
//! Every command that produces artifacts owns one output directory and puts
//! exactly one `manifest.txt` there, written *before* any real work starts
//! (status `running`) and rewritten on completion with the outcome and wall
//! time. All file writes go through temp-and-rename, so a crashed or killed
//! run never leaves truncated artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{
    class_color, load_class_names, load_dataset, resize_for_model, restore_prediction,
    save_dataset, save_image_png, split, stack_images, synth_class_names, synth_dataset,
    write_atomic, SegmentationSample,
};
use crate::error::{Error, Result};
use crate::metrics::{argmax_classes, ConfusionAccumulator, DiceVariant, EvalReport};
use crate::model::{FaslSeg, ModelConfig, ABLATION_ROWS};
use crate::tensor::{no_grad, Tensor};
use crate::train::{fit, FitReport, TrainArtifacts};
use crate::Elem;

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

fn write_manifest(dir: &Path, entries: &[(String, String)]) -> Result<()> {
    let text: String = entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    write_atomic(&dir.join("manifest.txt"), text.as_bytes())
}

/// Run `body` under a manifest: `manifest.txt` lands in `dir` with status
/// `running` before any compute, and is rewritten afterwards with `ok` or
/// `error` plus the wall time.
fn with_manifest<T>(
    dir: &Path,
    command: &str,
    detail: Vec<(String, String)>,
    body: impl FnOnce() -> Result<T>,
) -> Result<T> {
    fs::create_dir_all(dir)?;
    let start = Instant::now();
    let mut entries = vec![("command".to_string(), command.to_string())];
    entries.extend(detail);
    entries.push(("started_unix_ms".to_string(), unix_ms().to_string()));
    let mut running = entries.clone();
    running.push(("status".to_string(), "running".to_string()));
    write_manifest(dir, &running)?;

    let result = body();
    entries.push((
        "wall_seconds".to_string(),
        format!("{:.3}", start.elapsed().as_secs_f64()),
    ));
    match &result {
        Ok(_) => entries.push(("status".to_string(), "ok".to_string())),
        Err(e) => {
            entries.push(("status".to_string(), "error".to_string()));
            entries.push(("error".to_string(), e.to_string()));
        }
    }
    write_manifest(dir, &entries)?;
    result
}

// ---------------------------------------------------------------------------
// Data sources
// ---------------------------------------------------------------------------

/// Where a command gets its samples.
#[derive(Clone, Copy)]
pub enum DataSource<'a> {
    /// Deterministic generated scenes, sized by the config's data section.
    Synthetic,
    /// An `images/` + `masks/` directory.
    Dir(&'a Path),
}

impl DataSource<'_> {
    fn describe(&self) -> String {
        match self {
            DataSource::Synthetic => "synthetic".to_string(),
            DataSource::Dir(d) => d.display().to_string(),
        }
    }

    /// Load samples plus class names, checking the class count against the
    /// model section.
    fn load(&self, cfg: &RunConfig) -> Result<(Vec<SegmentationSample>, Vec<String>)> {
        let nc = cfg.model.num_classes;
        match self {
            DataSource::Synthetic => Ok((
                synth_dataset(cfg.data.synth_count, cfg.data.image_size, nc, cfg.data.seed)?,
                synth_class_names(nc),
            )),
            DataSource::Dir(dir) => {
                let names_path = dir.join("classes.txt");
                let names = if names_path.is_file() {
                    let names = load_class_names(&names_path)?;
                    if names.len() != nc {
                        return Err(Error::Config(format!(
                            "dataset {} declares {} classes but the model expects {nc}",
                            dir.display(),
                            names.len()
                        )));
                    }
                    names
                } else {
                    (0..nc).map(|i| format!("class-{i}")).collect()
                };
                Ok((load_dataset(dir, nc)?, names))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainOptions<'a> {
    pub config: RunConfig,
    pub data: DataSource<'a>,
    pub out_dir: &'a Path,
    /// Continue from `<out_dir>/last.ckpt` (same config required).
    pub resume: bool,
    /// Runtime cap on total optimizer steps (not part of the config).
    pub max_steps: Option<u64>,
}

/// Train a model; artifacts land in `out_dir`: `manifest.txt`, `config.txt`,
/// `train.log`, `best.ckpt` (highest monitored mIoU), `last.ckpt` (with
/// trainer state for resuming).
pub fn run_train(opts: &TrainOptions) -> Result<FitReport> {
    let cfg = &opts.config;
    cfg.validate()?;
    let text = cfg.canonical_text();
    let detail = vec![
        ("data".to_string(), opts.data.describe()),
        ("resume".to_string(), opts.resume.to_string()),
    ];
    with_manifest(opts.out_dir, "train", detail, || {
        write_atomic(&opts.out_dir.join("config.txt"), text.as_bytes())?;

        let (samples, _) = opts.data.load(cfg)?;
        if samples.is_empty() {
            return Err(Error::Data(format!(
                "no samples found in {}",
                opts.data.describe()
            )));
        }
        let resized = samples
            .iter()
            .map(|s| resize_for_model(s, cfg.data.image_size))
            .collect::<Result<Vec<_>>>()?;
        let (train_set, val_set) = split(resized, &cfg.data.split_spec())?;

        let model = FaslSeg::new(cfg.model.clone(), cfg.seed)?;
        let mut resume_state = None;
        if opts.resume {
            let ckpt_path = opts.out_dir.join("last.ckpt");
            if !ckpt_path.is_file() {
                return Err(Error::Config(format!(
                    "cannot resume: {} does not exist",
                    ckpt_path.display()
                )));
            }
            let ckpt = Checkpoint::load(&ckpt_path)?;
            ckpt.require_config(&text)?;
            ckpt.restore(model.params())?;
            resume_state = Some(ckpt.trainer.ok_or_else(|| {
                Error::Config("checkpoint has no trainer state to resume from".to_string())
            })?);
        }

        let mut train_cfg = cfg.train_config();
        train_cfg.max_steps = opts.max_steps;
        let artifacts = TrainArtifacts { dir: opts.out_dir, config_text: &text };
        fit(&model, &train_set, &val_set, &train_cfg, resume_state.as_ref(), Some(&artifacts))
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub struct EvalOptions<'a> {
    pub checkpoint: &'a Path,
    pub data: DataSource<'a>,
    pub out_dir: &'a Path,
    pub dice_variant: DiceVariant,
    /// Score the ground truth against itself instead of running the model —
    /// a pipeline sanity check that must yield 1.0 everywhere.
    pub oracle: bool,
    /// Also write per-sample prediction overlays as PNGs.
    pub overlay: bool,
}

pub struct EvalOutcome {
    pub miou: Elem,
    pub dice: Elem,
    pub report_text: String,
}

/// Evaluate a checkpoint on a dataset. Predictions are made at the model's
/// input size and restored to each sample's original extents before metric
/// accumulation. Writes `report.txt` and `report.tsv`.
pub fn run_eval(opts: &EvalOptions) -> Result<EvalOutcome> {
    let detail = vec![
        ("checkpoint".to_string(), opts.checkpoint.display().to_string()),
        ("data".to_string(), opts.data.describe()),
        ("dice_variant".to_string(), opts.dice_variant.name().to_string()),
        ("oracle".to_string(), opts.oracle.to_string()),
    ];
    with_manifest(opts.out_dir, "eval", detail, || {
        let ckpt = Checkpoint::load(opts.checkpoint)?;
        let cfg = RunConfig::parse(&ckpt.config_text).map_err(|e| {
            Error::Config(format!("embedded checkpoint config is unusable: {e}"))
        })?;
        let nc = cfg.model.num_classes;
        let (samples, names) = opts.data.load(&cfg)?;
        if samples.is_empty() {
            return Err(Error::Data(format!(
                "no samples found in {}",
                opts.data.describe()
            )));
        }

        let model = FaslSeg::new(cfg.model.clone(), cfg.seed)?;
        ckpt.restore(model.params())?;

        let mut acc = ConfusionAccumulator::new(nc)?;
        no_grad(|| -> Result<()> {
            for s in &samples {
                let pred = if opts.oracle {
                    s.mask.clone()
                } else {
                    let r = resize_for_model(s, cfg.data.image_size)?;
                    let logits = model.forward(&stack_images(&[&r])?, false)?;
                    let p = argmax_classes(&logits)?;
                    restore_prediction(
                        &p,
                        cfg.data.image_size,
                        cfg.data.image_size,
                        s.original_size,
                    )
                };
                acc.accumulate(&pred, &s.mask, s.height(), s.width())?;
                if opts.overlay {
                    write_overlay(opts.out_dir, s, &pred, nc)?;
                }
            }
            Ok(())
        })?;

        let report = EvalReport::from_accumulator(&acc, &names, opts.dice_variant)?;
        let text = report.to_text();
        write_atomic(&opts.out_dir.join("report.txt"), text.as_bytes())?;
        write_atomic(&opts.out_dir.join("report.tsv"), report.to_tsv().as_bytes())?;
        Ok(EvalOutcome { miou: report.iou.mean, dice: report.dice.mean, report_text: text })
    })
}

/// Blend the predicted classes over the image at half opacity.
fn write_overlay(
    out_dir: &Path,
    s: &SegmentationSample,
    pred: &[u8],
    num_classes: usize,
) -> Result<()> {
    let (h, w) = (s.height(), s.width());
    let img = s.image.data();
    let mut blended = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        let color = class_color(pred[p] as usize, num_classes);
        for ci in 0..3 {
            blended[ci * h * w + p] = 0.5 * img[ci * h * w + p] + 0.5 * color[ci];
        }
    }
    let dir = out_dir.join("overlays");
    fs::create_dir_all(&dir)?;
    save_image_png(
        &dir.join(format!("{}.png", s.id)),
        &Tensor::new(blended, &[3, h, w])?,
    )
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

pub struct AblateOptions<'a> {
    /// Base configuration; its ablation row is replaced per run.
    pub config: RunConfig,
    /// Rows to run; empty means the full matrix.
    pub rows: Vec<String>,
    pub data: DataSource<'a>,
    pub out_dir: &'a Path,
    pub max_steps: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct AblateRow {
    pub row: String,
    pub params: usize,
    pub miou: Elem,
    pub dice: Elem,
}

/// Train every requested ablation row (each in its own subdirectory) and
/// write a comparison table (`summary.txt`, `summary.tsv`).
pub fn run_ablate(opts: &AblateOptions) -> Result<Vec<AblateRow>> {
    let rows: Vec<String> = if opts.rows.is_empty() {
        ABLATION_ROWS.iter().map(|r| r.to_string()).collect()
    } else {
        opts.rows
            .iter()
            .map(|want| {
                ABLATION_ROWS
                    .iter()
                    .find(|r| r.eq_ignore_ascii_case(want))
                    .map(|r| r.to_string())
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "unknown ablation row {want:?}; valid rows: {}",
                            ABLATION_ROWS.join(", ")
                        ))
                    })
            })
            .collect::<Result<_>>()?
    };
    let detail = vec![
        ("data".to_string(), opts.data.describe()),
        ("rows".to_string(), rows.join(",")),
    ];
    with_manifest(opts.out_dir, "ablate", detail, || {
        let mut results = Vec::with_capacity(rows.len());
        for row in &rows {
            let mut cfg = opts.config.clone();
            cfg.ablation = row.clone();
            cfg.model = ModelConfig::ablation(row, cfg.preset, cfg.model.num_classes)?;
            let sub: PathBuf = opts.out_dir.join(row.to_lowercase());
            let report = run_train(&TrainOptions {
                config: cfg,
                data: opts.data,
                out_dir: &sub,
                resume: false,
                max_steps: opts.max_steps,
            })?;
            let last = report.rows.last().ok_or_else(|| {
                Error::Contract(format!("ablation row {row} trained zero epochs"))
            })?;
            let ckpt = Checkpoint::load(&sub.join("last.ckpt"))?;
            results.push(AblateRow {
                row: row.clone(),
                params: ckpt.params.iter().map(|e| e.data.len()).sum(),
                miou: last.val_miou,
                dice: last.val_dice,
            });
        }

        let mut tsv = String::from("row\tparams\tmiou\tdice\n");
        let mut txt = format!("{:<10}  {:>12}  {:>8}  {:>8}\n", "row", "params", "miou", "dice");
        for r in &results {
            tsv.push_str(&format!("{}\t{}\t{}\t{}\n", r.row, r.params, r.miou, r.dice));
            txt.push_str(&format!(
                "{:<10}  {:>12}  {:>8.4}  {:>8.4}\n",
                r.row, r.params, r.miou, r.dice
            ));
        }
        write_atomic(&opts.out_dir.join("summary.tsv"), tsv.as_bytes())?;
        write_atomic(&opts.out_dir.join("summary.txt"), txt.as_bytes())?;
        Ok(results)
    })
}

// ---------------------------------------------------------------------------
// info
// ---------------------------------------------------------------------------

fn thousands(n: u128) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn human_units(n: u128) -> String {
    const STEPS: [(u128, &str); 3] = [(1 << 30, "G"), (1 << 20, "M"), (1 << 10, "K")];
    for (scale, suffix) in STEPS {
        if n >= scale {
            return format!("{:.2} {suffix}", n as f64 / scale as f64);
        }
    }
    n.to_string()
}

/// Describe a configuration: parameter counts per component and an analytic
/// multiply-accumulate estimate for the given input size.
pub fn run_info(cfg: &RunConfig, input: (usize, usize)) -> Result<String> {
    cfg.validate()?;
    let model = FaslSeg::new(cfg.model.clone(), cfg.seed)?;
    let macs = cfg.model.mac_estimate(input.0, input.1)?;
    let mut out = format!(
        "model: {} preset, {} row, {} classes\ninput: {}x{}\n\nparameters:\n",
        cfg.preset.name(),
        cfg.ablation,
        cfg.model.num_classes,
        input.0,
        input.1
    );
    for (name, count) in model.param_breakdown() {
        out.push_str(&format!("  {name:<10} {:>14}\n", thousands(count as u128)));
    }
    out.push_str(&format!(
        "\nmac estimate: {} ({}Mac)\n",
        thousands(macs),
        human_units(macs)
    ));
    Ok(out)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub struct SynthOptions<'a> {
    pub out_dir: &'a Path,
    pub count: usize,
    pub size: usize,
    pub num_classes: usize,
    pub seed: u64,
}

/// Generate a synthetic dataset on disk in the loader's layout.
pub fn run_synth(opts: &SynthOptions) -> Result<()> {
    let detail = vec![
        ("count".to_string(), opts.count.to_string()),
        ("size".to_string(), opts.size.to_string()),
        ("num_classes".to_string(), opts.num_classes.to_string()),
        ("seed".to_string(), opts.seed.to_string()),
    ];
    with_manifest(opts.out_dir, "synth", detail, || {
        let samples = synth_dataset(opts.count, opts.size, opts.num_classes, opts.seed)?;
        save_dataset(opts.out_dir, &samples, &synth_class_names(opts.num_classes))
    })
}
