//! Reusable network blocks: pointwise conv + batch-norm + leaky ReLU, the
//! multi-head self-attention wrapper over feature maps, upsampling chains,
//! and stacked conv-block chains.
//!
//! Every block owns named [`Parameter`]s (and, for batch norm, running-stat
//! [`Buffer`]s) created from a caller-supplied seeded RNG, and exposes
//! `collect` to register them with a [`ParamSet`].

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::{attention, batch_norm_eval, batch_norm_train, conv2d, conv_transpose2d};
use crate::tensor::{Buffer, ParamSet, Parameter, Tensor};
use crate::Elem;

/// Batch-norm epsilon used across the model.
pub const BN_EPS: Elem = 1e-5;
/// Batch-norm running-stat momentum.
pub const BN_MOMENTUM: Elem = 0.1;
/// Negative slope of every leaky ReLU.
pub const LEAKY_SLOPE: Elem = 0.01;

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

pub mod init {
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use crate::Elem;

    /// One standard-normal draw via Box-Muller (deterministic given the RNG
    /// stream; avoids platform-dependent library samplers).
    pub fn std_normal(rng: &mut ChaCha8Rng) -> Elem {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random();
        (((-2.0 * u1.ln()).sqrt()) * (std::f64::consts::TAU * u2).cos()) as Elem
    }

    /// Normal(0, std²) truncated to ±2 std by redraw.
    pub fn trunc_normal(rng: &mut ChaCha8Rng, std: Elem, n: usize) -> Vec<Elem> {
        (0..n)
            .map(|_| loop {
                let z = std_normal(rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect()
    }

    /// Fan-out-scaled normal for conv weights: std = sqrt(2 / fan_out).
    pub fn conv_normal(rng: &mut ChaCha8Rng, fan_out: usize, n: usize) -> Vec<Elem> {
        let std = (2.0 / fan_out as Elem).sqrt();
        (0..n).map(|_| std_normal(rng) * std).collect()
    }
}

// ---------------------------------------------------------------------------
// ConvBlock: pointwise conv -> batch norm -> leaky ReLU
// ---------------------------------------------------------------------------

pub struct ConvBlock {
    pub conv_weight: Parameter,
    pub conv_bias: Parameter,
    pub bn_gamma: Parameter,
    pub bn_beta: Parameter,
    pub bn_running_mean: Buffer,
    pub bn_running_var: Buffer,
    pub leaky_slope: Elem,
    pub out_channels: usize,
}

impl ConvBlock {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<ConvBlock> {
        if cin == 0 || cout == 0 {
            return Err(Error::Config(format!(
                "conv block {name}: zero channel count ({cin} -> {cout})"
            )));
        }
        Ok(ConvBlock {
            conv_weight: Parameter::new(
                format!("{name}.conv_weight"),
                init::conv_normal(rng, cout, cout * cin),
                &[cout, cin, 1, 1],
            )?,
            conv_bias: Parameter::new(format!("{name}.conv_bias"), vec![0.0; cout], &[cout])?,
            bn_gamma: Parameter::new(format!("{name}.bn_gamma"), vec![1.0; cout], &[cout])?,
            bn_beta: Parameter::new(format!("{name}.bn_beta"), vec![0.0; cout], &[cout])?,
            bn_running_mean: Buffer::new(
                format!("{name}.bn_running_mean"),
                vec![0.0; cout],
                &[cout],
            ),
            bn_running_var: Buffer::new(
                format!("{name}.bn_running_var"),
                vec![1.0; cout],
                &[cout],
            ),
            leaky_slope: LEAKY_SLOPE,
            out_channels: cout,
        })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let y = conv2d(x, &self.conv_weight.tensor(), Some(&self.conv_bias.tensor()), 1, 0)?;
        let y = bn_forward(
            &y,
            &self.bn_gamma,
            &self.bn_beta,
            &self.bn_running_mean,
            &self.bn_running_var,
            training,
        )?;
        Ok(y.leaky_relu(self.leaky_slope))
    }

    pub fn collect(&self, set: &mut ParamSet) {
        set.add_param(&self.conv_weight);
        set.add_param(&self.conv_bias);
        set.add_param(&self.bn_gamma);
        set.add_param(&self.bn_beta);
        set.add_buffer(&self.bn_running_mean);
        set.add_buffer(&self.bn_running_var);
    }
}

/// Shared batch-norm forward: batch statistics (plus a running-stat update,
/// PyTorch-style with unbiased variance) in training mode, running
/// statistics in eval mode.
pub(crate) fn bn_forward(
    x: &Tensor,
    gamma: &Parameter,
    beta: &Parameter,
    running_mean: &Buffer,
    running_var: &Buffer,
    training: bool,
) -> Result<Tensor> {
    if training {
        let (y, mean, var) = batch_norm_train(x, &gamma.tensor(), &beta.tensor(), BN_EPS)?;
        let s = x.shape();
        let n = (s[0] * s[2] * s[3]) as Elem;
        let bessel = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        running_mean.update(|rm| {
            for (r, &m) in rm.iter_mut().zip(&mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
        });
        running_var.update(|rv| {
            for (r, &v) in rv.iter_mut().zip(&var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * bessel;
            }
        });
        Ok(y)
    } else {
        batch_norm_eval(
            x,
            &gamma.tensor(),
            &beta.tensor(),
            &running_mean.snapshot(),
            &running_var.snapshot(),
            BN_EPS,
        )
    }
}

// ---------------------------------------------------------------------------
// Mhsa: multi-head self-attention over an NCHW feature map
// ---------------------------------------------------------------------------

/// Vanilla multi-head self-attention applied to the token view of a feature
/// map. Projections are bias-free; there is no positional encoding and no
/// residual connection — the output is exactly the attention read-out.
pub struct Mhsa {
    pub heads: usize,
    pub d_model: usize,
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub wo: Parameter,
}

impl Mhsa {
    pub fn new(name: &str, d_model: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Mhsa> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "attention {name}: {heads} heads do not divide model width {d_model}"
            )));
        }
        let proj = |suffix: &str, rng: &mut ChaCha8Rng| {
            Parameter::new(
                format!("{name}.{suffix}"),
                init::trunc_normal(rng, 0.02, d_model * d_model),
                &[d_model, d_model],
            )
        };
        Ok(Mhsa {
            heads,
            d_model,
            wq: proj("wq", rng)?,
            wk: proj("wk", rng)?,
            wv: proj("wv", rng)?,
            wo: proj("wo", rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 4 || x.shape()[1] != self.d_model {
            return Err(Error::Dim(format!(
                "attention: input shape {:?} does not carry {} channels",
                x.shape(),
                self.d_model
            )));
        }
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let t = x.nchw_to_tokens()?;
        let y = attention(
            &t,
            &t,
            &self.wq.tensor(),
            &self.wk.tensor(),
            &self.wv.tensor(),
            &self.wo.tensor(),
            self.heads,
        )?;
        y.tokens_to_nchw(h, w)
    }

    pub fn collect(&self, set: &mut ParamSet) {
        set.add_param(&self.wq);
        set.add_param(&self.wk);
        set.add_param(&self.wv);
        set.add_param(&self.wo);
    }
}

// ---------------------------------------------------------------------------
// UpChain: a chain of x2 upsampling steps
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    /// Parameter-free bilinear interpolation.
    Bilinear,
    /// Learned transposed conv (k=4, stride=2, pad=1) + batch norm + ReLU.
    TransposedConv,
}

impl UpsampleMode {
    pub fn name(self) -> &'static str {
        match self {
            UpsampleMode::Bilinear => "bilinear",
            UpsampleMode::TransposedConv => "transposed-conv",
        }
    }

    pub fn parse(s: &str) -> Result<UpsampleMode> {
        match s {
            "bilinear" => Ok(UpsampleMode::Bilinear),
            "transposed-conv" | "transposed_conv" | "tconv" => Ok(UpsampleMode::TransposedConv),
            other => Err(Error::Config(format!(
                "unknown upsample mode {other:?} (expected bilinear or transposed-conv)"
            ))),
        }
    }
}

struct TConvStep {
    weight: Parameter,
    bias: Parameter,
    bn_gamma: Parameter,
    bn_beta: Parameter,
    bn_running_mean: Buffer,
    bn_running_var: Buffer,
}

/// `steps` consecutive x2 upsampling stages at a fixed channel width.
pub struct UpChain {
    pub mode: UpsampleMode,
    pub steps: usize,
    channels: usize,
    tconv: Vec<TConvStep>,
}

impl UpChain {
    pub fn new(
        name: &str,
        channels: usize,
        steps: usize,
        mode: UpsampleMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<UpChain> {
        let mut tconv = Vec::new();
        if mode == UpsampleMode::TransposedConv {
            for i in 0..steps {
                let step = format!("{name}.up{i}");
                tconv.push(TConvStep {
                    weight: Parameter::new(
                        format!("{step}.weight"),
                        init::conv_normal(rng, channels * 16, channels * channels * 16),
                        &[channels, channels, 4, 4],
                    )?,
                    bias: Parameter::new(format!("{step}.bias"), vec![0.0; channels], &[channels])?,
                    bn_gamma: Parameter::new(
                        format!("{step}.bn_gamma"),
                        vec![1.0; channels],
                        &[channels],
                    )?,
                    bn_beta: Parameter::new(
                        format!("{step}.bn_beta"),
                        vec![0.0; channels],
                        &[channels],
                    )?,
                    bn_running_mean: Buffer::new(
                        format!("{step}.bn_running_mean"),
                        vec![0.0; channels],
                        &[channels],
                    ),
                    bn_running_var: Buffer::new(
                        format!("{step}.bn_running_var"),
                        vec![1.0; channels],
                        &[channels],
                    ),
                });
            }
        }
        Ok(UpChain { mode, steps, channels, tconv })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        if x.shape().len() != 4 || x.shape()[1] != self.channels {
            return Err(Error::Dim(format!(
                "upsample chain: input shape {:?} does not carry {} channels",
                x.shape(),
                self.channels
            )));
        }
        let mut y = x.clone();
        match self.mode {
            UpsampleMode::Bilinear => {
                for _ in 0..self.steps {
                    y = y.interpolate_bilinear(2)?;
                }
            }
            UpsampleMode::TransposedConv => {
                for step in &self.tconv {
                    y = conv_transpose2d(&y, &step.weight.tensor(), Some(&step.bias.tensor()), 2, 1)?;
                    y = bn_forward(
                        &y,
                        &step.bn_gamma,
                        &step.bn_beta,
                        &step.bn_running_mean,
                        &step.bn_running_var,
                        training,
                    )?;
                    y = y.relu();
                }
            }
        }
        Ok(y)
    }

    pub fn collect(&self, set: &mut ParamSet) {
        for step in &self.tconv {
            set.add_param(&step.weight);
            set.add_param(&step.bias);
            set.add_param(&step.bn_gamma);
            set.add_param(&step.bn_beta);
            set.add_buffer(&step.bn_running_mean);
            set.add_buffer(&step.bn_running_var);
        }
    }
}

// ---------------------------------------------------------------------------
// ConvChain: stacked ConvBlocks along a width schedule
// ---------------------------------------------------------------------------

pub struct ConvChain {
    pub blocks: Vec<ConvBlock>,
}

impl ConvChain {
    /// Build one block per adjacent pair in `widths` (so `widths` must list
    /// at least an input and an output width).
    pub fn new(name: &str, widths: &[usize], rng: &mut ChaCha8Rng) -> Result<ConvChain> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "conv chain {name}: needs at least one block, got widths {widths:?}"
            )));
        }
        let mut blocks = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            blocks.push(ConvBlock::new(&format!("{name}.{i}"), pair[0], pair[1], rng)?);
        }
        Ok(ConvChain { blocks })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.forward(&y, training)?;
        }
        Ok(y)
    }

    pub fn collect(&self, set: &mut ParamSet) {
        for b in &self.blocks {
            b.collect(set);
        }
    }
}

/// Width schedule for a compression chain: start at `cin`, halve each step
/// (never below `cout`), and land exactly on `cout` after `n` blocks.
pub fn chain_widths(cin: usize, cout: usize, n: usize) -> Vec<usize> {
    let mut widths = vec![cin];
    for i in 0..n {
        let next = if i + 1 == n { cout } else { (widths[i] / 2).max(cout) };
        widths.push(next);
    }
    widths
}
