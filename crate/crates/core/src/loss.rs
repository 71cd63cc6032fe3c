//! Training losses: soft Tversky over class probabilities, pixel-wise
//! cross-entropy over logits, and their weighted combination.

use crate::error::{Error, Result};
use crate::tensor::ops::{cross_entropy_op, tversky_op};
use crate::tensor::Tensor;
use crate::Elem;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Tversky weight on false positives.
    pub tversky_alpha: Elem,
    /// Tversky weight on false negatives.
    pub tversky_beta: Elem,
    /// Weight of the Tversky term in the combined loss (the rest goes to
    /// cross-entropy).
    pub mix_alpha: Elem,
    /// Division-by-zero guard added to Tversky numerator and denominator.
    pub smooth_eps: Elem,
}

impl Default for LossConfig {
    fn default() -> LossConfig {
        LossConfig {
            tversky_alpha: 0.7,
            tversky_beta: 0.3,
            mix_alpha: 0.5,
            smooth_eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tversky_alpha >= 0.0 && self.tversky_beta >= 0.0) {
            return Err(Error::Config(format!(
                "loss: tversky weights ({}, {}) must be non-negative",
                self.tversky_alpha, self.tversky_beta
            )));
        }
        if !(0.0..=1.0).contains(&self.mix_alpha) {
            return Err(Error::Config(format!(
                "loss: mix weight {} outside [0, 1]",
                self.mix_alpha
            )));
        }
        if !(self.smooth_eps > 0.0) {
            return Err(Error::Config(format!(
                "loss: smoothing epsilon {} must be positive",
                self.smooth_eps
            )));
        }
        Ok(())
    }
}

/// One-hot encode integer labels (row-major over `b`, `h`, `w`) as a
/// constant `[B, C, H, W]` tensor.
pub fn one_hot(labels: &[u8], num_classes: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let hw = h * w;
    if labels.len() != b * hw {
        return Err(Error::Dim(format!(
            "one_hot: {} labels for {b}x{h}x{w} pixels",
            labels.len()
        )));
    }
    let mut data = vec![0.0; b * num_classes * hw];
    for bi in 0..b {
        for pos in 0..hw {
            let lab = labels[bi * hw + pos] as usize;
            if lab >= num_classes {
                return Err(Error::Contract(format!(
                    "one_hot: label {lab} out of range for {num_classes} classes at pixel \
                     (b={bi}, y={}, x={})",
                    pos / w,
                    pos % w
                )));
            }
            data[(bi * num_classes + lab) * hw + pos] = 1.0;
        }
    }
    Tensor::new(data, &[b, num_classes, hw / w, w])
}

/// Per-pixel class probabilities: softmax of the logits over channels.
pub fn class_probs(logits: &Tensor) -> Result<Tensor> {
    logits.softmax(1)
}

/// Soft Tversky loss `1 − mean_c (TP_c+ε)/(TP_c + α·FP_c + β·FN_c + ε)`,
/// counts pooled over the batch. `target` must be one-hot.
pub fn tversky_loss(probs: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    tversky_op(probs, target, cfg.tversky_alpha, cfg.tversky_beta, cfg.smooth_eps)
}

/// Mean pixel-wise cross-entropy between logits and integer labels.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    cross_entropy_op(logits, labels)
}

/// `mix·Tversky + (1−mix)·CE`. The extremes skip the unused term entirely,
/// so `mix=0` is exact cross-entropy and `mix=1` exact Tversky.
pub fn combined_loss(logits: &Tensor, labels: &[u8], cfg: &LossConfig) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.mix_alpha == 0.0 {
        return cross_entropy_loss(logits, labels);
    }
    let s = logits.shape().to_vec();
    let target = one_hot(labels, s[1], s[0], s[2], s[3])?;
    let tv = tversky_loss(&class_probs(logits)?, &target, cfg)?;
    if cfg.mix_alpha == 1.0 {
        return Ok(tv);
    }
    let ce = cross_entropy_loss(logits, labels)?;
    tv.scale(cfg.mix_alpha).add(&ce.scale(1.0 - cfg.mix_alpha))
}
