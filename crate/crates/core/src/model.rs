//! End-to-end segmentation network: encoder pyramid, two low-level and two
//! high-level feature-processing streams, channel fusion, and a shallow
//! decoder with an edge-enhancing classification head.
//!
//! Every ablation axis is a configuration switch: attention placement per
//! stream, head counts, and the upsampling mechanism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{chain_widths, init, ConvBlock, ConvChain, Mhsa, UpChain, UpsampleMode};
use crate::encoder::{stage_stride, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::ops::{concat_channels, conv2d};
use crate::tensor::{ParamSet, Parameter, Tensor};

/// Named model scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Toy,
    Small,
    Full,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Toy => "toy",
            Scale::Small => "small",
            Scale::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Scale> {
        match s {
            "toy" => Ok(Scale::Toy),
            "small" => Ok(Scale::Small),
            "full" => Ok(Scale::Full),
            other => Err(Error::Config(format!(
                "unknown scale preset {other:?} (expected toy, small or full)"
            ))),
        }
    }

    pub fn encoder_config(self) -> EncoderConfig {
        match self {
            Scale::Toy => EncoderConfig::toy(),
            Scale::Small => EncoderConfig::small(),
            Scale::Full => EncoderConfig::full(),
        }
    }
}

/// The four feature-processing stream slots, in fusion order.
pub const STREAM_NAMES: [&str; 4] = ["llfp1", "llfp2", "hlfp1", "hlfp2"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamKind {
    /// Low-level feature projection: single conv block, attention, upsample.
    Llfp,
    /// High-level feature projection: conv chain, upsample.
    Hlfp,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamConfig {
    pub kind: StreamKind,
    /// Multi-head self-attention after the conv stage.
    pub attention: bool,
    pub heads: usize,
    /// Number of conv blocks compressing the input width to `out_channels`.
    pub conv_chain_len: usize,
    /// Number of x2 enlargements after the conv/attention stages.
    pub up_steps: usize,
    pub upsample: UpsampleMode,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub streams: [StreamConfig; 4],
    /// Output width of each of the four decoder conv blocks.
    pub decoder_channels: [usize; 4],
    pub num_classes: usize,
    /// Enlargement from fused-feature resolution back to input resolution.
    pub final_upsample_factor: usize,
    /// Mechanism of the final enlargement (switched by the Model-9 ablation).
    pub decoder_upsample: UpsampleMode,
}

/// Valid rows of the ablation matrix.
pub const ABLATION_ROWS: [&str; 10] = [
    "Model-1", "Model-2", "Model-3", "Model-4", "Model-5", "Model-6", "Model-7", "Model-8",
    "Model-9", "FASL-Seg",
];

impl ModelConfig {
    /// Default network at the given scale: attention in both low-level
    /// streams with 2 and 4 heads, plain conv chains in the high-level
    /// streams, bilinear upsampling everywhere.
    pub fn preset(scale: Scale, num_classes: usize) -> ModelConfig {
        let encoder = scale.encoder_config();
        let out = 2 * encoder.channels[0];
        let stream = |kind, attention, heads, conv_chain_len, up_steps| StreamConfig {
            kind,
            attention,
            heads,
            conv_chain_len,
            up_steps,
            upsample: UpsampleMode::Bilinear,
            out_channels: out,
        };
        ModelConfig {
            encoder,
            streams: [
                stream(StreamKind::Llfp, true, 2, 1, 0),
                stream(StreamKind::Llfp, true, 4, 1, 1),
                stream(StreamKind::Hlfp, false, 0, 1, 2),
                stream(StreamKind::Hlfp, false, 0, 2, 3),
            ],
            decoder_channels: [2 * out, out, out / 2, out / 4],
            num_classes,
            final_upsample_factor: stage_stride(0),
            decoder_upsample: UpsampleMode::Bilinear,
        }
    }

    /// Configuration for one row of the ablation matrix.
    pub fn ablation(row: &str, scale: Scale, num_classes: usize) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(scale, num_classes);
        // Positional head counts (2 for the first stream of a pair, 4 for
        // the second) mirror the default low-level assignment.
        let enable = |cfg: &mut ModelConfig, idx: usize, heads: usize| {
            cfg.streams[idx].attention = true;
            cfg.streams[idx].heads = heads;
        };
        let disable_all = |cfg: &mut ModelConfig| {
            for s in &mut cfg.streams {
                s.attention = false;
                s.heads = 0;
            }
        };
        match row {
            "Model-1" => disable_all(&mut cfg),
            "Model-2" => {
                disable_all(&mut cfg);
                enable(&mut cfg, 0, 2);
            }
            "Model-3" => {
                disable_all(&mut cfg);
                enable(&mut cfg, 1, 4);
            }
            "Model-4" => {
                disable_all(&mut cfg);
                enable(&mut cfg, 3, 4);
            }
            "Model-5" => {
                disable_all(&mut cfg);
                enable(&mut cfg, 2, 2);
                enable(&mut cfg, 3, 4);
            }
            "Model-6" | "Model-7" | "Model-8" => {
                let heads = match row {
                    "Model-6" => 1,
                    "Model-7" => 2,
                    _ => 4,
                };
                cfg.streams[0].heads = heads;
                cfg.streams[1].heads = heads;
            }
            "Model-9" => {
                for s in &mut cfg.streams {
                    s.upsample = UpsampleMode::TransposedConv;
                }
                cfg.decoder_upsample = UpsampleMode::TransposedConv;
            }
            "FASL-Seg" => {}
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation row {other:?}; valid rows: {}",
                    ABLATION_ROWS.join(", ")
                )))
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let out = self.streams[0].out_channels;
        for (i, s) in self.streams.iter().enumerate() {
            let name = STREAM_NAMES[i];
            if s.out_channels != out || out == 0 {
                return Err(Error::Config(format!(
                    "stream {name}: out_channels {} breaks the fusion contract (all four \
                     streams must share one positive width, stream llfp1 has {out})",
                    s.out_channels
                )));
            }
            if s.conv_chain_len == 0 {
                return Err(Error::Config(format!(
                    "stream {name}: conv chain must have at least one block"
                )));
            }
            if s.attention && (s.heads == 0 || out % s.heads != 0) {
                return Err(Error::Config(format!(
                    "stream {name}: {} heads do not divide stream width {out}",
                    s.heads
                )));
            }
            // Each stream must land on the stride-4 grid of the first
            // pyramid level.
            if stage_stride(i) != stage_stride(0) << s.up_steps {
                return Err(Error::Config(format!(
                    "stream {name}: {} up steps cannot bring stride {} to {}",
                    s.up_steps,
                    stage_stride(i),
                    stage_stride(0)
                )));
            }
        }
        for (i, &c) in self.decoder_channels.iter().enumerate() {
            if c == 0 {
                return Err(Error::Config(format!("decoder block {i}: zero width")));
            }
        }
        if self.num_classes == 0 {
            return Err(Error::Config("model: num_classes must be at least 1".into()));
        }
        if self.final_upsample_factor != stage_stride(0) {
            return Err(Error::Config(format!(
                "model: final upsample factor {} does not restore the stride-{} fused \
                 features to input resolution",
                self.final_upsample_factor,
                stage_stride(0)
            )));
        }
        Ok(())
    }

    /// Channel count entering the decoder.
    pub fn fused_channels(&self) -> usize {
        4 * self.streams[0].out_channels
    }

    /// Analytic multiply-accumulate estimate for one forward pass on an
    /// `h x w` input (batch 1). Counts the linear work (convolutions, token
    /// projections, attention score/value products); normalization, softmax,
    /// activations, and bilinear interpolation are ignored.
    pub fn mac_estimate(&self, h: usize, w: usize) -> Result<u128> {
        if h == 0 || w == 0 || h % stage_stride(3) != 0 || w % stage_stride(3) != 0 {
            return Err(Error::Dim(format!(
                "mac estimate: input {h}x{w} is not a positive multiple of {}",
                stage_stride(3)
            )));
        }
        let e = &self.encoder;
        let mut total: u128 = 0;

        // Encoder stages.
        for i in 0..4 {
            let n = (h / stage_stride(i)) as u128 * (w / stage_stride(i)) as u128;
            let c = e.channels[i] as u128;
            let cin = if i == 0 { 3 } else { e.channels[i - 1] } as u128;
            let k = crate::encoder::PATCH_SPECS[i].0 as u128;
            total += n * c * cin * k * k;

            let r = e.sr_ratios[i] as u128;
            let n_r = n / (r * r);
            let mut block = 2 * n * c * c + 2 * n_r * c * c; // q, o, k, v
            if r > 1 {
                block += n_r * (c * r * r) * c; // spatial-reduction linear
            }
            block += 2 * n * n_r * c; // scores + weighted values
            block += 2 * n * c * (c * e.mlp_ratio as u128); // MLP
            total += e.depths[i] as u128 * block;
        }

        // Streams: stream i consumes pyramid level i.
        let tconv_step = |n_out: u128, c: u128| n_out * c * c * 16;
        for (i, s) in self.streams.iter().enumerate() {
            let n = (h / stage_stride(i)) as u128 * (w / stage_stride(i)) as u128;
            let widths = chain_widths(self.encoder.channels[i], s.out_channels, s.conv_chain_len);
            for pair in widths.windows(2) {
                total += n * pair[0] as u128 * pair[1] as u128;
            }
            let c = s.out_channels as u128;
            if s.attention {
                total += 4 * n * c * c + 2 * n * n * c;
            }
            if s.upsample == UpsampleMode::TransposedConv {
                for step in 0..s.up_steps {
                    total += tconv_step(n * 4u128.pow(step as u32 + 1), c);
                }
            }
        }

        // Decoder at the fused (stride-4) resolution.
        let n_d = (h / stage_stride(0)) as u128 * (w / stage_stride(0)) as u128;
        let mut cin = self.fused_channels() as u128;
        for &cout in &self.decoder_channels {
            total += n_d * cin * cout as u128;
            cin = cout as u128;
        }
        let c_last = self.decoder_channels[3] as u128;
        if self.decoder_upsample == UpsampleMode::TransposedConv {
            total += tconv_step(n_d * 4, c_last) + tconv_step(n_d * 16, c_last);
        }
        // Final 3x3 + pointwise heads at full resolution.
        total += (h as u128 * w as u128) * self.num_classes as u128 * c_last * 10;
        Ok(total)
    }
}

// ---------------------------------------------------------------------------
// Stream
// ---------------------------------------------------------------------------

struct Stream {
    chain: ConvChain,
    attn: Option<Mhsa>,
    up: UpChain,
}

impl Stream {
    fn new(name: &str, cin: usize, cfg: &StreamConfig, rng: &mut ChaCha8Rng) -> Result<Stream> {
        let widths = chain_widths(cin, cfg.out_channels, cfg.conv_chain_len);
        let chain = ConvChain::new(&format!("{name}.chain"), &widths, rng)?;
        let attn = if cfg.attention {
            Some(Mhsa::new(&format!("{name}.attn"), cfg.out_channels, cfg.heads, rng)?)
        } else {
            None
        };
        let up = UpChain::new(&format!("{name}.up"), cfg.out_channels, cfg.up_steps, cfg.upsample, rng)?;
        Ok(Stream { chain, attn, up })
    }

    fn forward(&self, f: &Tensor, training: bool) -> Result<Tensor> {
        let mut y = self.chain.forward(f, training)?;
        if let Some(attn) = &self.attn {
            y = attn.forward(&y)?;
        }
        self.up.forward(&y, training)
    }

    fn collect(&self, set: &mut ParamSet) {
        self.chain.collect(set);
        if let Some(attn) = &self.attn {
            attn.collect(set);
        }
        self.up.collect(set);
    }
}

/// Concatenate the four stream outputs along channels, in stream order.
fn fuse(outputs: &[Tensor]) -> Result<Tensor> {
    let first = outputs[0].shape().to_vec();
    for (i, t) in outputs.iter().enumerate().skip(1) {
        let s = t.shape();
        if s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
            return Err(Error::Dim(format!(
                "fuse: stream {} output {:?} does not align with stream {} output {:?}",
                STREAM_NAMES[i],
                s,
                STREAM_NAMES[0],
                first
            )));
        }
    }
    concat_channels(outputs)
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

/// Scale of the edge-enhancing stencil the classification head starts from.
const LAPLACIAN_INIT_SCALE: crate::Elem = 0.1;

struct Decoder {
    blocks: Vec<ConvBlock>,
    upsample: UpsampleMode,
    factor: usize,
    up: UpChain,
    head3_w: Parameter,
    head3_b: Parameter,
    head1_w: Parameter,
    head1_b: Parameter,
}

impl Decoder {
    fn new(name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Decoder> {
        let mut widths = vec![cfg.fused_channels()];
        widths.extend_from_slice(&cfg.decoder_channels);
        let mut blocks = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            blocks.push(ConvBlock::new(&format!("{name}.block{i}"), pair[0], pair[1], rng)?);
        }
        let c = cfg.decoder_channels[3];
        let steps = cfg.final_upsample_factor.trailing_zeros() as usize;
        let up = UpChain::new(&format!("{name}.up"), c, steps, cfg.decoder_upsample, rng)?;

        // 3x3 head: every kernel starts as the discrete Laplacian stencil
        // (center 8s, neighbors -s), kept fully trainable. A learnable
        // pointwise term adds a non-edge pathway.
        let k = cfg.num_classes;
        let stencil = [-1.0, -1.0, -1.0, -1.0, 8.0, -1.0, -1.0, -1.0, -1.0];
        let mut w3 = Vec::with_capacity(k * c * 9);
        for _ in 0..k * c {
            w3.extend(stencil.iter().map(|v| v * LAPLACIAN_INIT_SCALE));
        }
        Ok(Decoder {
            blocks,
            upsample: cfg.decoder_upsample,
            factor: cfg.final_upsample_factor,
            up,
            head3_w: Parameter::new(format!("{name}.head3_weight"), w3, &[k, c, 3, 3])?,
            head3_b: Parameter::new(format!("{name}.head3_bias"), vec![0.0; k], &[k])?,
            head1_w: Parameter::new(
                format!("{name}.head1_weight"),
                init::trunc_normal(rng, 0.02, k * c),
                &[k, c, 1, 1],
            )?,
            head1_b: Parameter::new(format!("{name}.head1_bias"), vec![0.0; k], &[k])?,
        })
    }

    fn forward(&self, fused: &Tensor, training: bool) -> Result<Tensor> {
        let mut y = fused.clone();
        for b in &self.blocks {
            y = b.forward(&y, training)?;
        }
        y = match self.upsample {
            UpsampleMode::Bilinear => y.interpolate_bilinear(self.factor)?,
            UpsampleMode::TransposedConv => self.up.forward(&y, training)?,
        };
        let edge = conv2d(&y, &self.head3_w.tensor(), Some(&self.head3_b.tensor()), 1, 1)?;
        let point = conv2d(&y, &self.head1_w.tensor(), Some(&self.head1_b.tensor()), 1, 0)?;
        edge.add(&point)
    }

    fn collect(&self, set: &mut ParamSet) {
        for b in &self.blocks {
            b.collect(set);
        }
        self.up.collect(set);
        set.add_param(&self.head3_w);
        set.add_param(&self.head3_b);
        set.add_param(&self.head1_w);
        set.add_param(&self.head1_b);
    }
}

// ---------------------------------------------------------------------------
// Full network
// ---------------------------------------------------------------------------

pub struct FaslSeg {
    cfg: ModelConfig,
    encoder: Encoder,
    streams: Vec<Stream>,
    decoder: Decoder,
    params: ParamSet,
}

/// Intermediate maps from [`FaslSeg::forward_traced`].
pub struct ForwardTrace {
    /// The four encoder maps, strides 4/8/16/32.
    pub pyramid: Vec<Tensor>,
    /// The four stream outputs, all at the common stream resolution.
    pub streams: Vec<Tensor>,
    /// Channel concatenation of the stream outputs.
    pub fused: Tensor,
    /// Per-class logits at input resolution.
    pub logits: Tensor,
}

impl FaslSeg {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<FaslSeg> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new("encoder", 3, &cfg.encoder, &mut rng)?;
        let mut streams = Vec::with_capacity(4);
        for i in 0..4 {
            streams.push(Stream::new(
                STREAM_NAMES[i],
                cfg.encoder.channels[i],
                &cfg.streams[i],
                &mut rng,
            )?);
        }
        let decoder = Decoder::new("decoder", &cfg, &mut rng)?;
        let mut params = ParamSet::new();
        encoder.collect(&mut params);
        for s in &streams {
            s.collect(&mut params);
        }
        decoder.collect(&mut params);
        Ok(FaslSeg { cfg, encoder, streams, decoder, params })
    }

    /// Per-class logits at input resolution.
    pub fn forward(&self, image: &Tensor, training: bool) -> Result<Tensor> {
        let pyramid = self.encoder.encode(image)?;
        let mut outs = Vec::with_capacity(4);
        for (i, stream) in self.streams.iter().enumerate() {
            outs.push(stream.forward(pyramid.level(i), training)?);
        }
        let fused = fuse(&outs)?;
        self.decoder.forward(&fused, training)
    }

    /// [`FaslSeg::forward`] keeping every intermediate map alive for
    /// inspection: encoder pyramid, stream outputs, fused map, logits.
    pub fn forward_traced(&self, image: &Tensor, training: bool) -> Result<ForwardTrace> {
        let pyramid = self.encoder.encode(image)?;
        let mut outs = Vec::with_capacity(4);
        for (i, stream) in self.streams.iter().enumerate() {
            outs.push(stream.forward(pyramid.level(i), training)?);
        }
        let fused = fuse(&outs)?;
        let logits = self.decoder.forward(&fused, training)?;
        Ok(ForwardTrace {
            pyramid: (0..4).map(|i| pyramid.level(i).clone()).collect(),
            streams: outs,
            fused,
            logits,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Trainable parameter totals per top-level component, plus the grand
    /// total, for reporting.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for p in self.params.params() {
            let name = p.name();
            let head = name.split('.').next().unwrap_or("").to_string();
            let n = p.shape().iter().product::<usize>();
            match groups.iter_mut().find(|(g, _)| *g == head) {
                Some((_, total)) => *total += n,
                None => groups.push((head, n)),
            }
        }
        let total = groups.iter().map(|(_, n)| n).sum();
        groups.push(("total".into(), total));
        groups
    }
}
