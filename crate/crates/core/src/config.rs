//! Run configuration: a plain-text `key = value` format with dotted section
//! prefixes (`model.`, `loss.`, `train.`, `augment.`, `data.`), a canonical
//! sorted rendering, and `--set`-style overrides.
//!
//! Every training hyperparameter is a named key, so a run is fully described
//! by its config text; checkpoints embed that text and refuse to load against
//! a different one.

use crate::blocks::UpsampleMode;
use crate::data::{AugmentConfig, SplitSpec};
use crate::encoder::MAX_STRIDE;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{ModelConfig, Scale, ABLATION_ROWS, STREAM_NAMES};
use crate::train::TrainConfig;
use crate::Elem;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Square side length samples are resized to before entering the model.
    pub image_size: usize,
    pub split_fraction: f64,
    /// Seed for dataset-side randomness (synthetic generation and the
    /// train/validation split).
    pub seed: u64,
    /// Number of generated samples when running on synthetic data.
    pub synth_count: usize,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig { image_size: 512, split_fraction: 0.8, seed: 42, synth_count: 16 }
    }
}

impl DataConfig {
    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec { train_fraction: self.split_fraction, seed: self.seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % MAX_STRIDE != 0 {
            return Err(Error::Config(format!(
                "data.image_size = {} must be a positive multiple of {MAX_STRIDE}",
                self.image_size
            )));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data.split_fraction = {} outside (0, 1]",
                self.split_fraction
            )));
        }
        if self.synth_count == 0 {
            return Err(Error::Config("data.synth_count must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Everything a run needs, resolvable to and from canonical text.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Scale,
    /// Ablation row the model section is based on.
    pub ablation: String,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub lr: Elem,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: Elem,
    pub seed: u64,
    pub augment_enabled: bool,
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        let preset = Scale::Full;
        RunConfig {
            preset,
            ablation: "FASL-Seg".to_string(),
            model: ModelConfig::preset(preset, 12),
            loss: LossConfig::default(),
            lr: 1e-5,
            epochs: 100,
            batch_size: 4,
            weight_decay: 0.0,
            seed: 42,
            augment_enabled: true,
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn fmt_float(v: Elem) -> String {
    format!("{v}")
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
}

fn parse_float(key: &str, v: &str) -> Result<Elem> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    /// Parse config text, then apply `overrides` (the CLI's `--set key=value`
    /// pairs) on top. Later assignments win. The result is validated.
    pub fn parse_with(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut pairs: Vec<(String, String, String)> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {line:?}", ln + 1))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string(), format!("line {}", ln + 1)));
        }
        for (k, v) in overrides {
            pairs.push((k.trim().to_string(), v.trim().to_string(), format!("override {k}")));
        }

        // The model identity keys rebuild the whole model section, so they
        // resolve first regardless of file order.
        let mut cfg = RunConfig::default();
        let mut num_classes = cfg.model.num_classes;
        for (k, v, ctx) in &pairs {
            let r = match k.as_str() {
                "model.preset" => Scale::parse(v).map(|s| cfg.preset = s),
                "model.num_classes" => parse_usize(k, v).map(|n| num_classes = n),
                "model.ablation" => ABLATION_ROWS
                    .iter()
                    .find(|r| r.eq_ignore_ascii_case(v))
                    .map(|r| cfg.ablation = r.to_string())
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "unknown ablation row {v:?}; valid rows: {}",
                            ABLATION_ROWS.join(", ")
                        ))
                    }),
                _ => Ok(()),
            };
            r.map_err(|e| Error::Config(format!("{ctx}: {e}")))?;
        }
        cfg.model = ModelConfig::ablation(&cfg.ablation, cfg.preset, num_classes)
            .expect("ablation rows from the valid list always build");

        for (k, v, ctx) in &pairs {
            cfg.apply(k, v).map_err(|e| Error::Config(format!("{ctx}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse_with(text, &[])
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        if let Some(rest) = key.strip_prefix("model.") {
            if let Some((stream, field)) = rest.split_once('.') {
                let idx = STREAM_NAMES
                    .iter()
                    .position(|n| *n == stream)
                    .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
                let s = &mut self.model.streams[idx];
                return match field {
                    "attention" => parse_bool(key, v).map(|b| s.attention = b),
                    "heads" => parse_usize(key, v).map(|n| s.heads = n),
                    "chain_len" => parse_usize(key, v).map(|n| s.conv_chain_len = n),
                    "up_steps" => parse_usize(key, v).map(|n| s.up_steps = n),
                    _ => Err(Error::Config(format!("unknown key {key:?}"))),
                };
            }
        }
        match key {
            // Handled in the identity pass.
            "model.preset" | "model.num_classes" | "model.ablation" => Ok(()),
            "model.stream_channels" => parse_usize(key, v).map(|c| {
                for s in &mut self.model.streams {
                    s.out_channels = c;
                }
                self.model.decoder_channels = [2 * c, c, (c / 2).max(1), (c / 4).max(1)];
            }),
            "model.upsample" => UpsampleMode::parse(v).map(|m| {
                for s in &mut self.model.streams {
                    s.upsample = m;
                }
            }),
            "model.decoder_upsample" => {
                UpsampleMode::parse(v).map(|m| self.model.decoder_upsample = m)
            }
            "loss.tversky_alpha" => parse_float(key, v).map(|x| self.loss.tversky_alpha = x),
            "loss.tversky_beta" => parse_float(key, v).map(|x| self.loss.tversky_beta = x),
            "loss.mix_alpha" => parse_float(key, v).map(|x| self.loss.mix_alpha = x),
            "loss.smooth_eps" => parse_float(key, v).map(|x| self.loss.smooth_eps = x),
            "train.lr" => parse_float(key, v).map(|x| self.lr = x),
            "train.epochs" => parse_usize(key, v).map(|n| self.epochs = n),
            "train.batch_size" => parse_usize(key, v).map(|n| self.batch_size = n),
            "train.weight_decay" => parse_float(key, v).map(|x| self.weight_decay = x),
            "train.seed" => parse_u64(key, v).map(|n| self.seed = n),
            "augment.enabled" => parse_bool(key, v).map(|b| self.augment_enabled = b),
            "augment.resized_crop" => parse_bool(key, v).map(|b| self.augment.resized_crop = b),
            "augment.hflip" => parse_bool(key, v).map(|b| self.augment.hflip = b),
            "augment.vflip" => parse_bool(key, v).map(|b| self.augment.vflip = b),
            "augment.flip_prob" => parse_float(key, v).map(|x| self.augment.flip_prob = x),
            "augment.crop_area_min" => parse_float(key, v).map(|x| self.augment.crop_area.0 = x),
            "augment.crop_area_max" => parse_float(key, v).map(|x| self.augment.crop_area.1 = x),
            "augment.crop_aspect_min" => {
                parse_float(key, v).map(|x| self.augment.crop_aspect.0 = x)
            }
            "augment.crop_aspect_max" => {
                parse_float(key, v).map(|x| self.augment.crop_aspect.1 = x)
            }
            "data.image_size" => parse_usize(key, v).map(|n| self.data.image_size = n),
            "data.split_fraction" => parse_f64(key, v).map(|x| self.data.split_fraction = x),
            "data.seed" => parse_u64(key, v).map(|n| self.data.seed = n),
            "data.synth_count" => parse_usize(key, v).map(|n| self.data.synth_count = n),
            _ => Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }

    /// Render the full configuration as sorted `key = value` lines. Parsing
    /// the result reproduces this config exactly.
    pub fn canonical_text(&self) -> String {
        let mut kv: Vec<(String, String)> = vec![
            ("model.preset".into(), self.preset.name().into()),
            ("model.ablation".into(), self.ablation.clone()),
            ("model.num_classes".into(), self.model.num_classes.to_string()),
            (
                "model.stream_channels".into(),
                self.model.streams[0].out_channels.to_string(),
            ),
            ("model.upsample".into(), self.model.streams[0].upsample.name().into()),
            (
                "model.decoder_upsample".into(),
                self.model.decoder_upsample.name().into(),
            ),
            ("loss.tversky_alpha".into(), fmt_float(self.loss.tversky_alpha)),
            ("loss.tversky_beta".into(), fmt_float(self.loss.tversky_beta)),
            ("loss.mix_alpha".into(), fmt_float(self.loss.mix_alpha)),
            ("loss.smooth_eps".into(), fmt_float(self.loss.smooth_eps)),
            ("train.lr".into(), fmt_float(self.lr)),
            ("train.epochs".into(), self.epochs.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.weight_decay".into(), fmt_float(self.weight_decay)),
            ("train.seed".into(), self.seed.to_string()),
            ("augment.enabled".into(), self.augment_enabled.to_string()),
            ("augment.resized_crop".into(), self.augment.resized_crop.to_string()),
            ("augment.hflip".into(), self.augment.hflip.to_string()),
            ("augment.vflip".into(), self.augment.vflip.to_string()),
            ("augment.flip_prob".into(), fmt_float(self.augment.flip_prob)),
            ("augment.crop_area_min".into(), fmt_float(self.augment.crop_area.0)),
            ("augment.crop_area_max".into(), fmt_float(self.augment.crop_area.1)),
            ("augment.crop_aspect_min".into(), fmt_float(self.augment.crop_aspect.0)),
            ("augment.crop_aspect_max".into(), fmt_float(self.augment.crop_aspect.1)),
            ("data.image_size".into(), self.data.image_size.to_string()),
            ("data.split_fraction".into(), format!("{}", self.data.split_fraction)),
            ("data.seed".into(), self.data.seed.to_string()),
            ("data.synth_count".into(), self.data.synth_count.to_string()),
        ];
        for (i, name) in STREAM_NAMES.iter().enumerate() {
            let s = &self.model.streams[i];
            kv.push((format!("model.{name}.attention"), s.attention.to_string()));
            kv.push((format!("model.{name}.heads"), s.heads.to_string()));
            kv.push((format!("model.{name}.chain_len"), s.conv_chain_len.to_string()));
            kv.push((format!("model.{name}.up_steps"), s.up_steps.to_string()));
        }
        kv.sort();
        kv.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// The trainer settings this config describes.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            seed: self.seed,
            // Step caps are a runtime knob (smoke runs), not part of the
            // persisted configuration.
            max_steps: None,
            loss: self.loss,
            augment: self.augment_enabled.then_some(self.augment),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.num_classes > 256 {
            return Err(Error::Config(format!(
                "model.num_classes = {} exceeds 256 (masks are 8-bit)",
                self.model.num_classes
            )));
        }
        self.train_config().validate()?;
        self.augment.validate()?;
        self.data.validate()
    }
}
