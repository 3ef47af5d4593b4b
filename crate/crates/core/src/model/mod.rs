//! Per-modality mini U-Nets and the single / middle / late fusion wiring.
//!
//! Each modality owns an encoder. Decoders are routed per modality through
//! `decoder_of`: middle fusion points both modalities at decoder 0, so the
//! shared decoder exists exactly once in the parameter store.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, BnMode, Graph, ParamId, Var, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};

const ENCODER_STREAM: u64 = 0x656e63;
const DECODER_STREAM: u64 = 0x646563;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiniUNetConfig {
    /// Input channels per modality; one entry for single-modality models.
    pub in_channels: Vec<usize>,
    pub base_width: usize,
    pub depth: usize,
    pub num_classes: usize,
}

impl Default for MiniUNetConfig {
    fn default() -> Self {
        MiniUNetConfig {
            in_channels: vec![2, 2],
            base_width: 16,
            depth: 3,
            num_classes: 4,
        }
    }
}

impl MiniUNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be >= 1"));
        }
        if self.base_width == 0 || self.num_classes == 0 {
            return Err(Error::config("base_width and num_classes must be positive"));
        }
        if self.in_channels.is_empty() || self.in_channels.len() > 2 || self.in_channels.contains(&0) {
            return Err(Error::config("in_channels needs one or two positive entries"));
        }
        Ok(())
    }

    /// Input height and width must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let m = self.spatial_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::config(format!(
                "spatial extent {h}x{w} not divisible by 2^depth = {m}"
            )));
        }
        Ok(())
    }

    fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Single,
    Middle,
    Late,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Single => "single",
            FusionMode::Middle => "middle",
            FusionMode::Late => "late",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(FusionMode::Single),
            "middle" => Ok(FusionMode::Middle),
            "late" => Ok(FusionMode::Late),
            other => Err(Error::config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionSpec {
    pub mode: FusionMode,
}

impl FusionSpec {
    pub fn new(mode: FusionMode) -> Self {
        FusionSpec { mode }
    }

    pub fn share_decoder(&self) -> bool {
        self.mode == FusionMode::Middle
    }
}

/// Trainable parameters addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    fn add(&mut self, name: String, value: Tensor) -> ParamId {
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Running statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBuffers {
    pub name: String,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnId(pub usize);

#[derive(Clone, Debug, PartialEq)]
struct ConvBlock {
    weight: ParamId,
    bias: Option<ParamId>,
    norm: Option<(ParamId, ParamId, BnId)>,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Encoder {
    stem: ConvBlock,
    stages: Vec<ConvBlock>,
}

#[derive(Clone, Debug, PartialEq)]
struct Decoder {
    /// Ordered bottleneck-to-input.
    ups: Vec<ConvBlock>,
    head: ConvBlock,
}

/// Controls normalization mode and which parameters take gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOpts {
    pub train: bool,
    /// Encoder parameters enter as constants and its batch norms use running
    /// statistics, whatever `train` says.
    pub freeze_encoder: bool,
}

impl ForwardOpts {
    pub fn train() -> Self {
        ForwardOpts {
            train: true,
            freeze_encoder: false,
        }
    }

    pub fn eval() -> Self {
        ForwardOpts::default()
    }
}

pub struct ForwardOut {
    pub logits: Var,
    /// Softmax over classes, `Q` for this modality.
    pub probs: Var,
    /// Encoder outputs ordered input to bottleneck.
    pub features: Vec<Var>,
}

/// Batch statistics gathered during a training forward, applied afterwards
/// with [`ModelPair::apply_batch_stats`].
#[derive(Debug, Default)]
pub struct BnUpdates(Vec<(BnId, BatchStats)>);

impl BnUpdates {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair {
    config: MiniUNetConfig,
    fusion: FusionSpec,
    params: ParamStore,
    bn: Vec<BnBuffers>,
    encoders: Vec<Encoder>,
    decoders: Vec<Decoder>,
    decoder_of: Vec<usize>,
}

struct Builder<'a> {
    params: &'a mut ParamStore,
    bn: &'a mut Vec<BnBuffers>,
}

impl Builder<'_> {
    fn conv(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        normalized: bool,
    ) -> ConvBlock {
        let fan_in = (cin * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = cout * cin * kernel * kernel;
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = self.params.add(
            format!("{name}.w"),
            Tensor::new(vec![cout, cin, kernel, kernel], w).expect("weight shape"),
        );
        let (bias, norm) = if normalized {
            let gamma = self.params.add(format!("{name}.bn.g"), Tensor::full(&[cout], 1.0));
            let beta = self.params.add(format!("{name}.bn.b"), Tensor::zeros(&[cout]));
            self.bn.push(BnBuffers {
                name: format!("{name}.bn"),
                running_mean: vec![0.0; cout],
                running_var: vec![1.0; cout],
            });
            (None, Some((gamma, beta, BnId(self.bn.len() - 1))))
        } else {
            (Some(self.params.add(format!("{name}.b"), Tensor::zeros(&[cout]))), None)
        };
        ConvBlock {
            weight,
            bias,
            norm,
            stride,
            padding: kernel / 2,
        }
    }

    fn encoder(&mut self, cfg: &MiniUNetConfig, d: usize, cin: usize, seed: u64) -> Encoder {
        let mut rng = rng::stream(seed, ENCODER_STREAM);
        let stem = self.conv(&mut rng, &format!("enc{d}.stem"), cin, cfg.width(0), 3, 1, true);
        let stages = (1..=cfg.depth)
            .map(|s| {
                self.conv(
                    &mut rng,
                    &format!("enc{d}.stage{s}"),
                    cfg.width(s - 1),
                    cfg.width(s),
                    3,
                    2,
                    true,
                )
            })
            .collect();
        Encoder { stem, stages }
    }

    fn decoder(&mut self, cfg: &MiniUNetConfig, j: usize, seed: u64) -> Decoder {
        let mut rng = rng::stream(seed, DECODER_STREAM);
        let ups = (1..=cfg.depth)
            .rev()
            .map(|s| {
                self.conv(
                    &mut rng,
                    &format!("dec{j}.up{s}"),
                    cfg.width(s) + cfg.width(s - 1),
                    cfg.width(s - 1),
                    3,
                    1,
                    true,
                )
            })
            .collect();
        let head = self.conv(&mut rng, &format!("dec{j}.head"), cfg.width(0), cfg.num_classes, 1, 1, false);
        Decoder { ups, head }
    }
}

impl ModelPair {
    /// Deterministic He-uniform initialization. Encoders share one init
    /// stream and decoders another, so equal-width modalities start from
    /// identical weights.
    pub fn build(config: MiniUNetConfig, fusion: FusionSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut bn = Vec::new();
        let mut b = Builder {
            params: &mut params,
            bn: &mut bn,
        };
        let modalities = config.in_channels.len();
        let encoders: Vec<Encoder> = config
            .in_channels
            .iter()
            .enumerate()
            .map(|(d, &cin)| b.encoder(&config, d, cin, seed))
            .collect();
        let n_dec = if fusion.share_decoder() { 1 } else { modalities };
        let decoders = (0..n_dec).map(|j| b.decoder(&config, j, seed)).collect();
        let decoder_of = (0..modalities)
            .map(|d| if fusion.share_decoder() { 0 } else { d })
            .collect();
        Ok(ModelPair {
            config,
            fusion,
            params,
            bn,
            encoders,
            decoders,
            decoder_of,
        })
    }

    pub fn config(&self) -> &MiniUNetConfig {
        &self.config
    }

    pub fn fusion(&self) -> FusionSpec {
        self.fusion
    }

    pub fn modalities(&self) -> usize {
        self.encoders.len()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_buffers(&self) -> &[BnBuffers] {
        &self.bn
    }

    pub fn bn_buffers_mut(&mut self) -> &mut [BnBuffers] {
        &mut self.bn
    }

    /// Index of the decoder modality `d` routes through.
    pub fn decoder_index(&self, d: usize) -> usize {
        self.decoder_of[d]
    }

    fn check_modality(&self, d: usize) -> Result<()> {
        if d >= self.modalities() {
            return Err(Error::dim(
                "forward",
                format!("modality index {d} out of range for {} modalities", self.modalities()),
            ));
        }
        Ok(())
    }

    fn block_ids(block: &ConvBlock) -> Vec<ParamId> {
        let mut ids = vec![block.weight];
        ids.extend(block.bias);
        if let Some((g, b, _)) = block.norm {
            ids.extend([g, b]);
        }
        ids
    }

    pub fn encoder_param_ids(&self, d: usize) -> Vec<ParamId> {
        let e = &self.encoders[d];
        std::iter::once(&e.stem)
            .chain(&e.stages)
            .flat_map(Self::block_ids)
            .collect()
    }

    /// Parameters of the decoder modality `d` routes through.
    pub fn decoder_param_ids(&self, d: usize) -> Vec<ParamId> {
        let dec = &self.decoders[self.decoder_of[d]];
        dec.ups.iter().chain(std::iter::once(&dec.head)).flat_map(Self::block_ids).collect()
    }

    pub fn encoder_bn_ids(&self, d: usize) -> Vec<BnId> {
        let e = &self.encoders[d];
        std::iter::once(&e.stem).chain(&e.stages).filter_map(|b| b.norm.map(|n| n.2)).collect()
    }

    pub fn decoder_bn_ids(&self, d: usize) -> Vec<BnId> {
        let dec = &self.decoders[self.decoder_of[d]];
        dec.ups.iter().filter_map(|b| b.norm.map(|n| n.2)).collect()
    }

    fn run_block(
        &self,
        g: &mut Graph,
        block: &ConvBlock,
        x: Var,
        train: bool,
        frozen: bool,
        updates: &mut BnUpdates,
    ) -> Result<Var> {
        let bind = |g: &mut Graph, id: ParamId| {
            let value = self.params.get(id).clone();
            if frozen {
                g.constant(value)
            } else {
                g.param(value, id)
            }
        };
        let w = bind(g, block.weight);
        let b = block.bias.map(|id| bind(g, id));
        let y = g.conv2d(x, w, b, block.stride, block.padding)?;
        let Some((gamma, beta, bn)) = block.norm else {
            return Ok(y);
        };
        let gamma = bind(g, gamma);
        let beta = bind(g, beta);
        let buf = &self.bn[bn.0];
        let mode = if train && !frozen {
            BnMode::Train
        } else {
            BnMode::Eval {
                running_mean: &buf.running_mean,
                running_var: &buf.running_var,
            }
        };
        let (y, stats) = g.batch_norm(y, gamma, beta, mode)?;
        if let Some(stats) = stats {
            updates.0.push((bn, stats));
        }
        Ok(g.relu(y))
    }

    fn check_input(&self, g: &Graph, d: usize, x: Var) -> Result<()> {
        self.check_modality(d)?;
        let (_, c, h, w) = g.value(x).dims4("forward")?;
        if c != self.config.in_channels[d] {
            return Err(Error::dim(
                "forward",
                format!(
                    "modality {} expects {} channels, got {c}",
                    d + 1,
                    self.config.in_channels[d]
                ),
            ));
        }
        self.config.check_spatial(h, w)
    }

    fn run_encoder(
        &self,
        g: &mut Graph,
        d: usize,
        x: Var,
        opts: ForwardOpts,
        updates: &mut BnUpdates,
    ) -> Result<Vec<Var>> {
        let enc = &self.encoders[d];
        let frozen = opts.freeze_encoder;
        let mut feats = vec![self.run_block(g, &enc.stem, x, opts.train, frozen, updates)?];
        for stage in &enc.stages {
            let prev = *feats.last().unwrap();
            feats.push(self.run_block(g, stage, prev, opts.train, frozen, updates)?);
        }
        Ok(feats)
    }

    /// Runs modality `d` end to end. Training-mode batch statistics are
    /// appended to `updates`.
    pub fn forward(
        &self,
        g: &mut Graph,
        d: usize,
        x: Var,
        opts: ForwardOpts,
        updates: &mut BnUpdates,
    ) -> Result<ForwardOut> {
        self.check_input(g, d, x)?;
        let features = self.run_encoder(g, d, x, opts, updates)?;
        let dec = &self.decoders[self.decoder_of[d]];
        let mut y = *features.last().unwrap();
        for (k, block) in dec.ups.iter().enumerate() {
            let skip = features[features.len() - 2 - k];
            let up = g.upsample2(y)?;
            let cat = g.concat(up, skip)?;
            y = self.run_block(g, block, cat, opts.train, false, updates)?;
        }
        let logits = self.run_block(g, &dec.head, y, opts.train, false, updates)?;
        let probs = g.softmax(logits)?;
        Ok(ForwardOut {
            logits,
            probs,
            features,
        })
    }

    pub fn encoder_features(&self, g: &mut Graph, d: usize, x: Var) -> Result<Vec<Var>> {
        self.check_input(g, d, x)?;
        self.run_encoder(g, d, x, ForwardOpts::eval(), &mut BnUpdates::default())
    }

    /// Blends observed batch statistics into running estimates with
    /// momentum 0.1, in the order they were recorded.
    pub fn apply_batch_stats(&mut self, updates: BnUpdates) {
        for (id, stats) in updates.0 {
            let buf = &mut self.bn[id.0];
            for (r, m) in buf.running_mean.iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in buf.running_var.iter_mut().zip(&stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }

    /// Evaluation-mode class probabilities for a plain input tensor.
    pub fn predict(&self, d: usize, x: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = self.forward(&mut g, d, xv, ForwardOpts::eval(), &mut BnUpdates::default())?;
        Ok(g.value(out.probs).clone())
    }

    /// Single-modality model whose encoder is copied (parameters and
    /// running statistics) from modality `d` of `source`, with a freshly
    /// initialized decoder for `num_classes` classes.
    pub fn from_encoder(source: &ModelPair, d: usize, num_classes: usize, seed: u64) -> Result<Self> {
        source.check_modality(d)?;
        let config = MiniUNetConfig {
            in_channels: vec![source.config.in_channels[d]],
            num_classes,
            ..source.config.clone()
        };
        let mut target = ModelPair::build(config, FusionSpec::new(FusionMode::Single), seed)?;
        for (dst, src) in target.encoder_param_ids(0).into_iter().zip(source.encoder_param_ids(d)) {
            *target.params.get_mut(dst) = source.params.get(src).clone();
        }
        for (dst, src) in target.encoder_bn_ids(0).into_iter().zip(source.encoder_bn_ids(d)) {
            let s = &source.bn[src.0];
            let t = &mut target.bn[dst.0];
            t.running_mean = s.running_mean.clone();
            t.running_var = s.running_var.clone();
        }
        Ok(target)
    }

    /// Zeroes the final classification layers; predictions become uniform.
    pub fn zero_heads(&mut self) {
        for dec in &self.decoders {
            for id in Self::block_ids(&dec.head) {
                let t = self.params.get_mut(id);
                t.data_mut().fill(0.0);
            }
        }
    }
}
