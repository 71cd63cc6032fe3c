//! Adam optimizer and the deterministic training loop.
//!
//! All randomness (epoch shuffling, per-sample augmentation) derives from
//! `(seed, epoch, sample)` hashes, so an epoch's batches and transforms do
//! not depend on how many epochs ran before it. Combined with the saved
//! optimizer state, that makes a resumed run reproduce an uninterrupted one
//! bit for bit.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, TensorEntry, TrainerState};
use crate::data::{
    augment, splitmix, stack_images, stack_masks, write_atomic, AugmentConfig,
    SegmentationSample,
};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, LossConfig};
use crate::metrics::{argmax_classes, ConfusionAccumulator, DiceVariant};
use crate::model::FaslSeg;
use crate::tensor::{no_grad, Parameter};
use crate::Elem;

pub const ADAM_BETA1: Elem = 0.9;
pub const ADAM_BETA2: Elem = 0.999;
pub const ADAM_EPS: Elem = 1e-8;

const TAG_SHUFFLE: u64 = 0x5548;
const TAG_AUGMENT: u64 = 0xA716;

fn derive_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed ^ tag);
    h = splitmix(h ^ a);
    h = splitmix(h ^ b);
    ChaCha8Rng::seed_from_u64(h)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with bias correction (β₁ = 0.9, β₂ = 0.999, ε = 1e-8) and optional
/// decoupled weight decay.
pub struct Adam {
    lr: Elem,
    weight_decay: Elem,
    step: u64,
    m: Vec<Vec<Elem>>,
    v: Vec<Vec<Elem>>,
}

impl Adam {
    pub fn new(lr: Elem, weight_decay: Elem) -> Adam {
        Adam { lr, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. Every parameter must carry a gradient from a
    /// preceding `backward`.
    pub fn step(&mut self, params: &[Parameter]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters but was given {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (i, p) in params.iter().enumerate() {
            let g = p.grad().ok_or_else(|| {
                Error::Contract(format!("parameter {} has no gradient", p.name()))
            })?;
            let mut w = p.snapshot();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..w.len() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] -= self.lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + self.weight_decay * w[j]);
            }
            p.set_data(w)?;
        }
        Ok(())
    }

    /// Capture moments (zeros when no step has run yet) for checkpointing.
    pub fn export(&self, params: &[Parameter], next_epoch: u64) -> TrainerState {
        let entry = |bank: &[Vec<Elem>], i: usize, p: &Parameter| TensorEntry {
            name: p.name(),
            shape: p.shape(),
            data: bank.get(i).cloned().unwrap_or_else(|| vec![0.0; p.numel()]),
        };
        TrainerState {
            step: self.step,
            next_epoch,
            first: params.iter().enumerate().map(|(i, p)| entry(&self.m, i, p)).collect(),
            second: params.iter().enumerate().map(|(i, p)| entry(&self.v, i, p)).collect(),
        }
    }

    /// Restore moments and the step counter from a checkpointed state,
    /// matching entries to parameters by name.
    pub fn import(&mut self, state: &TrainerState, params: &[Parameter]) -> Result<()> {
        let pick = |bank: &[TensorEntry], p: &Parameter| -> Result<Vec<Elem>> {
            let e = bank.iter().find(|e| e.name == p.name()).ok_or_else(|| {
                Error::Config(format!("trainer state has no moments for parameter {}", p.name()))
            })?;
            if e.data.len() != p.numel() {
                return Err(Error::Config(format!(
                    "trainer state moments for {} have {} elements, parameter has {}",
                    p.name(),
                    e.data.len(),
                    p.numel()
                )));
            }
            Ok(e.data.clone())
        };
        self.m = params.iter().map(|p| pick(&state.first, p)).collect::<Result<_>>()?;
        self.v = params.iter().map(|p| pick(&state.second, p)).collect::<Result<_>>()?;
        self.step = state.step;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: Elem,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: Elem,
    pub seed: u64,
    /// Optional hard cap on total optimizer steps (for smoke runs).
    pub max_steps: Option<u64>,
    pub loss: LossConfig,
    /// `None` disables augmentation entirely.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 1e-5,
            epochs: 100,
            batch_size: 4,
            weight_decay: 0.0,
            seed: 42,
            max_steps: None,
            loss: LossConfig::default(),
            augment: Some(AugmentConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".to_string()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        self.loss.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Fit loop
// ---------------------------------------------------------------------------

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: Elem,
    pub val_miou: Elem,
    pub val_dice: Elem,
}

impl EpochRow {
    pub const TSV_HEADER: &'static str = "epoch\ttrain_loss\tval_miou\tval_dice";

    pub fn tsv(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.epoch, self.train_loss, self.val_miou, self.val_dice)
    }
}

/// Where `fit` writes its artifacts: `train.log`, `last.ckpt` (with trainer
/// state, refreshed every epoch), and `best.ckpt` (highest monitored mIoU).
pub struct TrainArtifacts<'a> {
    pub dir: &'a Path,
    pub config_text: &'a str,
}

pub struct FitReport {
    /// Rows for the epochs this call executed.
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_miou: Elem,
    /// Total optimizer steps completed (including resumed ones).
    pub steps: u64,
    pub final_state: TrainerState,
}

/// Mean mIoU and Dice (standard variant) of model predictions over a sample
/// set, evaluated without gradients in batches of equal extents.
pub fn evaluate_model(
    model: &FaslSeg,
    samples: &[SegmentationSample],
    batch_size: usize,
) -> Result<(Elem, Elem)> {
    let nc = model.config().num_classes;
    let mut acc = ConfusionAccumulator::new(nc)?;
    no_grad(|| -> Result<()> {
        for chunk in samples.chunks(batch_size.max(1)) {
            let refs: Vec<&SegmentationSample> = chunk.iter().collect();
            let x = stack_images(&refs)?;
            let logits = model.forward(&x, false)?;
            let pred = argmax_classes(&logits)?;
            let hw = chunk[0].height() * chunk[0].width();
            for (i, s) in chunk.iter().enumerate() {
                acc.accumulate(&pred[i * hw..(i + 1) * hw], &s.mask, s.height(), s.width())?;
            }
        }
        Ok(())
    })?;
    Ok((acc.iou().mean, acc.dice(DiceVariant::Standard).mean))
}

/// Train `model` on `train_set`, monitoring `val_set` (or the training set
/// itself when no validation samples are given) once per epoch.
///
/// Each epoch runs `ceil(n / batch_size)` steps over a seeded shuffle of the
/// training set, with the final short batch included. A non-finite loss
/// aborts with a numerical error naming the epoch and step. Passing `resume`
/// continues from a checkpointed trainer state; because every epoch's
/// randomness is derived from `(seed, epoch)`, the continuation matches an
/// uninterrupted run exactly.
pub fn fit(
    model: &FaslSeg,
    train_set: &[SegmentationSample],
    val_set: &[SegmentationSample],
    cfg: &TrainConfig,
    resume: Option<&TrainerState>,
    artifacts: Option<&TrainArtifacts>,
) -> Result<FitReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("fit: training set is empty".to_string()));
    }
    let nc = model.config().num_classes;
    for s in train_set.iter().chain(val_set) {
        s.validate_classes(nc)?;
    }
    let params = model.params().params();

    let mut adam = Adam::new(cfg.lr, cfg.weight_decay);
    let mut start_epoch = 0usize;
    if let Some(state) = resume {
        adam.import(state, params)?;
        start_epoch = state.next_epoch as usize;
    }
    let monitored = if val_set.is_empty() { train_set } else { val_set };

    // The log accumulates across resumes so the file always holds the full
    // history.
    let mut log_text = String::new();
    if let Some(a) = artifacts {
        let log_path = a.dir.join("train.log");
        if resume.is_some() && log_path.is_file() {
            log_text = std::fs::read_to_string(&log_path)?;
        } else {
            log_text = format!("{}\n", EpochRow::TSV_HEADER);
        }
    }

    let mut rows = Vec::new();
    let mut best = (start_epoch, Elem::NEG_INFINITY);
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, TAG_SHUFFLE, epoch as u64, 0));

        let mut loss_sum = 0.0;
        let mut batches = 0u64;
        let mut capped = false;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|ms| adam.step_count() >= ms) {
                capped = true;
                break;
            }
            let batch: Vec<SegmentationSample> = chunk
                .iter()
                .map(|&i| match &cfg.augment {
                    Some(acfg) => {
                        let mut rng = derive_rng(cfg.seed, TAG_AUGMENT, epoch as u64, i as u64);
                        augment(&train_set[i], acfg, &mut rng)
                    }
                    None => Ok(train_set[i].clone()),
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&SegmentationSample> = batch.iter().collect();
            let x = stack_images(&refs)?;
            let labels = stack_masks(&refs);

            model.params().zero_grad();
            let logits = model.forward(&x, true)?;
            // Diverged activations surface either as a loss-op rejection of
            // non-finite probabilities or as a non-finite loss value; both
            // are numerical failures with run context, not caller mistakes.
            let loss = match combined_loss(&logits, &labels, &cfg.loss) {
                Ok(l) => l,
                Err(e) if logits.data().iter().any(|v| !v.is_finite()) => {
                    return Err(Error::Numerical(format!(
                        "non-finite network output at epoch {epoch}, step {}: {e}",
                        adam.step_count()
                    )))
                }
                Err(e) => return Err(e),
            };
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss ({value}) at epoch {epoch}, step {}",
                    adam.step_count()
                )));
            }
            loss.backward()?;
            adam.step(params)?;
            loss_sum += value;
            batches += 1;
        }

        if batches > 0 {
            let (val_miou, val_dice) = evaluate_model(model, monitored, cfg.batch_size)?;
            let row = EpochRow {
                epoch,
                train_loss: loss_sum / batches as Elem,
                val_miou,
                val_dice,
            };
            let is_best = val_miou > best.1;
            if is_best {
                best = (epoch, val_miou);
            }
            if let Some(a) = artifacts {
                log_text.push_str(&row.tsv());
                log_text.push('\n');
                write_atomic(&a.dir.join("train.log"), log_text.as_bytes())?;
                let state = adam.export(params, epoch as u64 + 1);
                let ckpt = Checkpoint::capture(a.config_text, model.params(), Some(state));
                ckpt.save(&a.dir.join("last.ckpt"))?;
                if is_best {
                    ckpt.save(&a.dir.join("best.ckpt"))?;
                }
            }
            rows.push(row);
        }
        if capped {
            break;
        }
    }

    let steps = adam.step_count();
    let final_epoch = rows.last().map_or(start_epoch as u64, |r| r.epoch as u64 + 1);
    Ok(FitReport {
        best_epoch: best.0,
        best_miou: best.1,
        steps,
        final_state: adam.export(params, final_epoch),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::model::{ModelConfig, Scale};
    use crate::tensor::{ParamSet, Tensor};

    fn toy_model(num_classes: usize, seed: u64) -> FaslSeg {
        FaslSeg::new(ModelConfig::preset(Scale::Toy, num_classes), seed).unwrap()
    }

    fn linear_loss(p: &Parameter, weights: &[Elem]) -> Tensor {
        let w = Tensor::new(weights.to_vec(), &[weights.len()]).unwrap();
        p.tensor().mul(&w).unwrap().sum_all()
    }

    #[test]
    fn first_step_matches_the_closed_form() {
        let p = Parameter::new("w", vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let grads = [2.0, 0.0, -3.0];
        linear_loss(&p, &grads).backward().unwrap();
        let lr = 1e-3;
        let mut adam = Adam::new(lr, 0.0);
        adam.step(std::slice::from_ref(&p)).unwrap();
        let got = p.snapshot();
        for (j, &g) in grads.iter().enumerate() {
            let expect = [1.0, 2.0, 3.0][j] - lr * g / (g.abs() + ADAM_EPS);
            assert!(
                (got[j] - expect).abs() < 1e-15,
                "element {j}: {} vs {expect}",
                got[j]
            );
        }
        // The zero-gradient element is exactly untouched.
        assert_eq!(got[1], 2.0);
    }

    #[test]
    fn update_magnitude_approaches_lr_under_constant_gradients() {
        let p = Parameter::new("w", vec![0.0, 0.0], &[2]).unwrap();
        let lr = 1e-3;
        let mut adam = Adam::new(lr, 0.0);
        let mut before = p.snapshot();
        let mut last_delta = [0.0; 2];
        for _ in 0..400 {
            p.zero_grad();
            linear_loss(&p, &[1.0, -0.5]).backward().unwrap();
            adam.step(std::slice::from_ref(&p)).unwrap();
            let after = p.snapshot();
            last_delta = [after[0] - before[0], after[1] - before[1]];
            before = after;
        }
        // Constant gradient: both moments converge so each step moves by
        // almost exactly -lr * sign(g), regardless of |g|.
        assert!((last_delta[0] + lr).abs() < 0.01 * lr, "{last_delta:?}");
        assert!((last_delta[1] - lr).abs() < 0.01 * lr, "{last_delta:?}");
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let used = Parameter::new("used", vec![1.0], &[1]).unwrap();
        let unused = Parameter::new("stream.skip.weight", vec![1.0], &[1]).unwrap();
        let mut set = ParamSet::new();
        set.add_param(&used);
        set.add_param(&unused);
        linear_loss(&used, &[1.0]).backward().unwrap();
        let mut adam = Adam::new(1e-3, 0.0);
        let err = adam.step(set.params()).err().unwrap();
        assert!(err.to_string().contains("stream.skip.weight"), "{err}");
    }

    #[test]
    fn epoch_step_counts_follow_ceil_division() {
        let model = toy_model(2, 1);
        let cfg = TrainConfig {
            lr: 1e-4,
            epochs: 1,
            batch_size: 4,
            augment: None,
            ..Default::default()
        };

        let four = synth_dataset(4, 32, 2, 3).unwrap();
        let report = fit(&model, &four, &[], &cfg, None, None).unwrap();
        assert_eq!(report.steps, 1);
        assert_eq!(report.rows.len(), 1);

        let five = synth_dataset(5, 32, 2, 3).unwrap();
        let model = toy_model(2, 1);
        let report = fit(&model, &five, &[], &cfg, None, None).unwrap();
        assert_eq!(report.steps, 2);
    }

    #[test]
    fn max_steps_caps_the_run() {
        let model = toy_model(2, 1);
        let data = synth_dataset(4, 32, 2, 3).unwrap();
        let cfg = TrainConfig {
            lr: 1e-4,
            epochs: 50,
            batch_size: 2,
            max_steps: Some(3),
            augment: None,
            ..Default::default()
        };
        let report = fit(&model, &data, &[], &cfg, None, None).unwrap();
        assert_eq!(report.steps, 3);
        // Two full-epoch rows (2 steps each would exceed the cap mid-epoch:
        // epoch 0 runs 2 steps, epoch 1 runs 1).
        assert_eq!(report.rows.len(), 2);
    }

    #[test]
    fn loss_decreases_on_a_tiny_overfit() {
        let model = toy_model(2, 7);
        let data = synth_dataset(2, 32, 2, 11).unwrap();
        let cfg = TrainConfig {
            lr: 1e-3,
            epochs: 10,
            batch_size: 2,
            augment: None,
            ..Default::default()
        };
        let report = fit(&model, &data, &[], &cfg, None, None).unwrap();
        let first = report.rows.first().unwrap().train_loss;
        let last = report.rows.last().unwrap().train_loss;
        assert!(last < first * 0.95, "loss did not decrease: {first} -> {last}");
        assert!(report.rows.iter().all(|r| r.val_miou.is_finite()));
    }

    #[test]
    fn resume_matches_the_uninterrupted_run_bit_for_bit() {
        let data = synth_dataset(2, 32, 2, 13).unwrap();
        let base = TrainConfig {
            lr: 1e-3,
            epochs: 4,
            batch_size: 1,
            // Includes augmentation so the per-epoch RNG derivation is
            // exercised too.
            ..Default::default()
        };

        let straight_model = toy_model(2, 5);
        let straight = fit(&straight_model, &data, &[], &base, None, None).unwrap();

        let resumed_model = toy_model(2, 5);
        let half = TrainConfig { epochs: 2, ..base.clone() };
        let first_half = fit(&resumed_model, &data, &[], &half, None, None).unwrap();
        assert_eq!(first_half.final_state.next_epoch, 2);
        let second_half =
            fit(&resumed_model, &data, &[], &base, Some(&first_half.final_state), None).unwrap();

        assert_eq!(second_half.rows, straight.rows[2..].to_vec());
        for (a, b) in straight_model
            .params()
            .params()
            .iter()
            .zip(resumed_model.params().params())
        {
            assert_eq!(a.snapshot(), b.snapshot(), "parameter {} diverged", a.name());
        }
        for (a, b) in straight_model
            .params()
            .buffers()
            .iter()
            .zip(resumed_model.params().buffers())
        {
            assert_eq!(a.snapshot(), b.snapshot(), "buffer {} diverged", a.name());
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        let model = toy_model(2, 1);
        let p = &model.params().params()[0];
        p.set_data(vec![Elem::INFINITY; p.numel()]).unwrap();
        let data = synth_dataset(2, 32, 2, 3).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 2, augment: None, ..Default::default() };
        let err = fit(&model, &data, &[], &cfg, None, None).err().unwrap();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("epoch 0"), "{err}");
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let model = toy_model(2, 1);
        let err = fit(&model, &[], &[], &TrainConfig::default(), None, None).err().unwrap();
        assert!(err.to_string().contains("empty"), "{err}");
    }

    #[test]
    fn artifacts_land_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let model = toy_model(2, 3);
        let data = synth_dataset(3, 32, 2, 5).unwrap();
        let cfg = TrainConfig {
            lr: 1e-3,
            epochs: 2,
            batch_size: 2,
            augment: None,
            ..Default::default()
        };
        let arts = TrainArtifacts { dir: dir.path(), config_text: "train.lr = 0.001\n" };
        let report = fit(&model, &data[..2], &data[2..], &cfg, None, Some(&arts)).unwrap();

        let log = std::fs::read_to_string(dir.path().join("train.log")).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], EpochRow::TSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], report.rows[0].tsv());

        let last = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
        assert_eq!(last.config_text, "train.lr = 0.001\n");
        let state = last.trainer.unwrap();
        assert_eq!(state.next_epoch, 2);
        assert_eq!(state.step, report.steps);
        assert!(dir.path().join("best.ckpt").is_file());
    }
}
