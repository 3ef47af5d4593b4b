//! Pretraining and transfer loops, run logs and resumable checkpoints.

mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autodiff::{Graph, Var};
use crate::data::{augment, normalize, Location, TrainView};
use crate::error::{Error, Result};
use crate::eval::{argmax_labels, stack_images, ConfusionMatrix};
use crate::labels::{LabelMap, SoftLabel};
use crate::loss::{seg_loss, total_loss, LossWeights, MaskRole, ModalityMasks, WeightMask};
use crate::model::{BnUpdates, Checkpoint, FusionMode, FusionSpec, ForwardOpts, MiniUNetConfig, ModelPair};
use crate::rng::{derive_seed, stream2};
use crate::select::{select, SelectionMasks, SelectionSchedule};
use crate::smooth::{smooth, SeasonalLabels, SmoothingParams};
use crate::tensor::Tensor;

pub use optim::{Adam, Plateau, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

const EPOCH_STREAM: u64 = 0x65706f;
const DECODER_INIT: u64 = 0x786672;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// One model on data modality 0 or 1.
    Single(usize),
    MidF,
    LateF,
    CromssMidF,
    CromssLateF,
}

impl TrainMode {
    pub const ALL: [TrainMode; 6] = [
        TrainMode::Single(0),
        TrainMode::Single(1),
        TrainMode::MidF,
        TrainMode::LateF,
        TrainMode::CromssMidF,
        TrainMode::CromssLateF,
    ];

    pub fn fusion(self) -> FusionMode {
        match self {
            TrainMode::Single(_) => FusionMode::Single,
            TrainMode::MidF | TrainMode::CromssMidF => FusionMode::Middle,
            TrainMode::LateF | TrainMode::CromssLateF => FusionMode::Late,
        }
    }

    pub fn selection(self) -> bool {
        matches!(self, TrainMode::CromssMidF | TrainMode::CromssLateF)
    }

    /// Data modality feeding each model modality.
    pub fn data_modalities(self) -> Vec<usize> {
        match self {
            TrainMode::Single(d) => vec![d],
            _ => vec![0, 1],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Single(0) => "single1",
            TrainMode::Single(_) => "single2",
            TrainMode::MidF => "midF",
            TrainMode::LateF => "lateF",
            TrainMode::CromssMidF => "cromss_midF",
            TrainMode::CromssLateF => "cromss_lateF",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown training mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub base_width: usize,
    pub depth: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Side of the square training crops.
    pub crop: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub schedule: SelectionSchedule,
    pub smoothing: SmoothingParams,
    pub consistency_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::CromssMidF,
            base_width: 6,
            depth: 3,
            lr: 5e-3,
            batch_size: 16,
            epochs: 60,
            crop: 32,
            plateau_patience: 9,
            plateau_factor: 0.5,
            schedule: SelectionSchedule::default(),
            smoothing: SmoothingParams::default(),
            consistency_weight: 1.0,
            seed: 0,
        }
    }
}

fn check_loop(lr: f64, batch: usize, crop: usize, depth: usize, factor: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::config(format!("learning rate {lr} must be positive")));
    }
    if batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::config(format!("plateau factor {factor} outside (0, 1]")));
    }
    if depth == 0 || crop == 0 || crop % (1 << depth) != 0 {
        return Err(Error::config(format!("crop {crop} not divisible by 2^depth")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_loop(self.lr, self.batch_size, self.crop, self.depth, self.plateau_factor)?;
        if self.base_width == 0 {
            return Err(Error::config("base width must be positive"));
        }
        if !(self.consistency_weight >= 0.0) {
            return Err(Error::config("consistency weight must be nonnegative"));
        }
        self.schedule.validate()?;
        self.smoothing.validate()
    }
}

/// How the downstream encoder is initialized.
#[derive(Clone, Copy, Debug)]
pub enum TransferInit<'m> {
    Random,
    /// Model modality `d` of a pretrained model.
    Pretrained(&'m ModelPair, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferConfig {
    pub frozen: bool,
    /// Downstream data modality.
    pub modality: usize,
    pub base_width: usize,
    pub depth: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub crop: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            frozen: true,
            modality: 0,
            base_width: 6,
            depth: 3,
            lr: 5e-4,
            batch_size: 16,
            epochs: 30,
            crop: 32,
            plateau_patience: 5,
            plateau_factor: 0.5,
            seed: 0,
        }
    }
}

/// Mean loss terms over an epoch. Single-model runs leave the second
/// modality and the consistency terms at zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Terms {
    pub total: f64,
    pub seg: [f64; 2],
    pub kl: [f64; 2],
}

impl Terms {
    fn add(&mut self, o: &Terms) {
        self.total += o.total;
        for d in 0..2 {
            self.seg[d] += o.seg[d];
            self.kl[d] += o.kl[d];
        }
    }

    fn scale(&mut self, s: f64) {
        self.total *= s;
        for d in 0..2 {
            self.seg[d] *= s;
            self.kl[d] *= s;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub train: Terms,
    pub val: Terms,
    /// Validation mIoU against the (noisy) validation labels.
    pub val_miou: [f64; 2],
    /// Steps in which some class had a zero selection threshold.
    pub zero_threshold_steps: usize,
    pub wall_ms: f64,
}

impl EpochRow {
    pub const COLUMNS: [&'static str; 18] = [
        "epoch",
        "lr",
        "alpha",
        "gamma",
        "train_total",
        "train_seg1",
        "train_seg2",
        "train_kl12",
        "train_kl21",
        "val_total",
        "val_seg1",
        "val_seg2",
        "val_kl12",
        "val_kl21",
        "val_miou1",
        "val_miou2",
        "zero_threshold_steps",
        "wall_ms",
    ];

    pub fn values(&self) -> [f64; 18] {
        [
            self.epoch as f64,
            self.lr,
            self.alpha,
            self.gamma,
            self.train.total,
            self.train.seg[0],
            self.train.seg[1],
            self.train.kl[0],
            self.train.kl[1],
            self.val.total,
            self.val.seg[0],
            self.val.seg[1],
            self.val.kl[0],
            self.val.kl[1],
            self.val_miou[0],
            self.val_miou[1],
            self.zero_threshold_steps as f64,
            self.wall_ms,
        ]
    }

    fn from_values(v: &[f64]) -> Self {
        EpochRow {
            epoch: v[0] as usize,
            lr: v[1],
            alpha: v[2],
            gamma: v[3],
            train: Terms {
                total: v[4],
                seg: [v[5], v[6]],
                kl: [v[7], v[8]],
            },
            val: Terms {
                total: v[9],
                seg: [v[10], v[11]],
                kl: [v[12], v[13]],
            },
            val_miou: [v[14], v[15]],
            zero_threshold_steps: v[16] as usize,
            wall_ms: v[17],
        }
    }

    /// Everything except wall time.
    pub fn loss_columns(&self) -> [f64; 17] {
        let v = self.values();
        v[..17].try_into().expect("fixed width")
    }
}

/// Append-only per-epoch record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    rows: Vec<EpochRow>,
}

impl RunLog {
    pub fn rows(&self) -> &[EpochRow] {
        &self.rows
    }

    pub fn push(&mut self, row: EpochRow) {
        self.rows.push(row);
    }

    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(EpochRow::COLUMNS).map_err(crate::eval::csv_err)?;
        for r in &self.rows {
            out.write_record(r.values().iter().map(|v| format!("{v:?}")))
                .map_err(crate::eval::csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Loss columns only, so that checkpoints of identical runs match
    /// byte for byte.
    fn to_tensor(&self) -> Tensor {
        let n = EpochRow::COLUMNS.len() - 1;
        let data: Vec<f64> = self.rows.iter().flat_map(|r| r.loss_columns()).collect();
        Tensor::new(vec![self.rows.len(), n], data).expect("fixed width")
    }

    /// Restored rows carry zero wall time.
    fn from_tensor(t: &Tensor) -> Result<Self> {
        let n = EpochRow::COLUMNS.len() - 1;
        if t.rank() != 2 || t.shape()[1] != n {
            return Err(Error::format("run log tensor has the wrong shape"));
        }
        Ok(RunLog {
            rows: t
                .data()
                .chunks(n)
                .map(|c| {
                    let mut v = c.to_vec();
                    v.push(0.0);
                    EpochRow::from_values(&v)
                })
                .collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Objective {
    /// Two modalities under Eq. (1)-style co-training.
    Pair { selection: bool },
    /// One model, segmentation loss only.
    Single { frozen: bool },
}

/// The shared optimization loop behind [`pretrain`] and [`transfer`].
pub struct Trainer<'a> {
    view: TrainView<'a>,
    objective: Objective,
    mode: Option<TrainMode>,
    data_d: Vec<usize>,
    model: ModelPair,
    adam: Adam,
    plateau: Plateau,
    epoch: usize,
    epochs: usize,
    batch_size: usize,
    crop: usize,
    schedule: SelectionSchedule,
    smoothing: SmoothingParams,
    weights: LossWeights,
    seed: u64,
    log: RunLog,
}

/// Called with `(epoch, step, masks)` after each selection step.
pub type MaskHook<'h> = dyn FnMut(usize, usize, &SelectionMasks) -> Result<()> + 'h;

impl<'a> Trainer<'a> {
    pub fn new(view: TrainView<'a>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let data_d = cfg.mode.data_modalities();
        let channels = view.spec.channels();
        let mc = MiniUNetConfig {
            in_channels: data_d.iter().map(|&d| channels[d]).collect(),
            base_width: cfg.base_width,
            depth: cfg.depth,
            num_classes: view.spec.num_classes,
        };
        let model = ModelPair::build(mc, FusionSpec::new(cfg.mode.fusion()), cfg.seed)?;
        let objective = match cfg.mode {
            TrainMode::Single(_) => Objective::Single { frozen: false },
            m => Objective::Pair {
                selection: m.selection(),
            },
        };
        Ok(Trainer {
            adam: Adam::new(model.params()),
            plateau: Plateau::new(cfg.lr, cfg.plateau_patience, cfg.plateau_factor),
            view,
            objective,
            mode: Some(cfg.mode),
            data_d,
            model,
            epoch: 0,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            crop: cfg.crop,
            schedule: cfg.schedule,
            smoothing: cfg.smoothing,
            weights: LossWeights {
                consistency: cfg.consistency_weight,
            },
            seed: cfg.seed,
            log: RunLog::default(),
        })
    }

    pub fn new_transfer(view: TrainView<'a>, init: TransferInit<'_>, cfg: &TransferConfig) -> Result<Self> {
        check_loop(cfg.lr, cfg.batch_size, cfg.crop, cfg.depth, cfg.plateau_factor)?;
        let d = cfg.modality;
        let channels = view.spec.channels();
        if d >= channels.len() {
            return Err(Error::config(format!("downstream modality {} does not exist", d + 1)));
        }
        let c = view.spec.num_classes;
        let dec_seed = derive_seed(cfg.seed, DECODER_INIT);
        let model = match init {
            TransferInit::Random => {
                let mc = MiniUNetConfig {
                    in_channels: vec![channels[d]],
                    base_width: cfg.base_width,
                    depth: cfg.depth,
                    num_classes: c,
                };
                ModelPair::build(mc, FusionSpec::new(FusionMode::Single), dec_seed)?
            }
            TransferInit::Pretrained(src, md) => {
                if md >= src.modalities() {
                    return Err(Error::config(format!("pretrained model has no modality {}", md + 1)));
                }
                if src.config().in_channels[md] != channels[d] {
                    return Err(Error::config(format!(
                        "pretrained encoder takes {} channels, downstream modality {} has {}",
                        src.config().in_channels[md],
                        d + 1,
                        channels[d]
                    )));
                }
                ModelPair::from_encoder(src, md, c, dec_seed)?
            }
        };
        Ok(Trainer {
            adam: Adam::new(model.params()),
            plateau: Plateau::new(cfg.lr, cfg.plateau_patience, cfg.plateau_factor),
            view,
            objective: Objective::Single { frozen: cfg.frozen },
            mode: None,
            data_d: vec![d],
            model,
            epoch: 0,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            crop: cfg.crop,
            schedule: SelectionSchedule::default(),
            smoothing: SmoothingParams::none(),
            weights: LossWeights::default(),
            seed: cfg.seed,
            log: RunLog::default(),
        })
    }

    /// Continues a pretraining run from a checkpoint written by
    /// [`Trainer::checkpoint`] under the same configuration.
    pub fn resume(view: TrainView<'a>, cfg: &TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(view, cfg)?;
        let meta = |k: &str| ckpt.meta.get(k).cloned().unwrap_or_default();
        if meta("mode") != cfg.mode.as_str() || meta("seed") != cfg.seed.to_string() {
            return Err(Error::config(format!(
                "checkpoint was written by mode {} seed {}, config asks for {} seed {}",
                meta("mode"),
                meta("seed"),
                cfg.mode,
                cfg.seed
            )));
        }
        if ckpt.model.config() != t.model.config() || ckpt.model.fusion() != t.model.fusion() {
            return Err(Error::config("checkpoint architecture differs from the config"));
        }
        t.adam = Adam::from_extras(ckpt.model.params(), &ckpt.extras)?;
        t.plateau = Plateau::from_extras(&ckpt.extras)?;
        t.log = RunLog::from_tensor(ckpt.extras.get("runlog").ok_or_else(|| Error::format("checkpoint lacks runlog"))?)?;
        t.epoch = t.log.rows().len();
        t.model = ckpt.model;
        Ok(t)
    }

    pub fn model(&self) -> &ModelPair {
        &self.model
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut extras = BTreeMap::new();
        self.adam.to_extras(self.model.params(), &mut extras);
        self.plateau.to_extras(&mut extras);
        extras.insert("runlog".into(), self.log.to_tensor());
        let mut meta = BTreeMap::new();
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("seed".into(), self.seed.to_string());
        let mode = self.mode.map_or("transfer", TrainMode::as_str);
        meta.insert("mode".into(), mode.to_string());
        let dm: Vec<String> = self.data_d.iter().map(|d| (d + 1).to_string()).collect();
        meta.insert("data_modalities".into(), dm.join(","));
        Checkpoint {
            model: self.model.clone(),
            extras,
            meta,
        }
    }

    pub fn into_parts(self) -> (ModelPair, RunLog) {
        (self.model, self.log)
    }

    pub fn run(mut self, mut hook: Option<&mut MaskHook<'_>>) -> Result<(ModelPair, RunLog)> {
        while !self.finished() {
            self.run_epoch(hook.as_deref_mut())?;
        }
        Ok(self.into_parts())
    }

    fn batch_inputs(&self, locs: &[&Location], rng: &mut rand_chacha::ChaCha8Rng) -> Result<Batch> {
        let c = self.view.spec.num_classes;
        let mut images: Vec<Vec<Tensor>> = vec![Vec::new(); self.data_d.len()];
        let mut labels = Vec::new();
        let mut targets = Vec::new();
        for loc in locs {
            let s = augment(loc, self.crop, rng)?;
            for (k, &d) in self.data_d.iter().enumerate() {
                images[k].push(normalize(&s.images[d], &self.view.norm[d])?);
            }
            targets.push(smooth(&s.labels, &s.seasons, c, &self.smoothing)?);
            labels.push(s.labels);
        }
        Batch::assemble(images, labels, targets)
    }

    fn val_inputs(&self) -> Result<Option<Batch>> {
        if self.view.val.is_empty() {
            return Ok(None);
        }
        let c = self.view.spec.num_classes;
        let mut images: Vec<Vec<Tensor>> = vec![Vec::new(); self.data_d.len()];
        let mut labels = Vec::new();
        let mut targets = Vec::new();
        for &l in self.view.val {
            let loc = &self.view.locations[l];
            let season = loc.id % loc.labels.len();
            for (k, &d) in self.data_d.iter().enumerate() {
                images[k].push(normalize(&loc.images[season][d], &self.view.norm[d])?);
            }
            let seasons = SeasonalLabels::new(loc.labels.clone())?;
            targets.push(smooth(&loc.labels[season], &seasons, c, &self.smoothing)?);
            labels.push(loc.labels[season].clone());
        }
        Batch::assemble(images, labels, targets).map(Some)
    }

    /// Builds the objective on `g`; returns the loss node, per-term values
    /// and the selection masks when selection ran.
    fn objective(
        &self,
        g: &mut Graph,
        batch: &Batch,
        opts: ForwardOpts,
        alpha_gamma: Option<(f64, f64)>,
        updates: &mut BnUpdates,
    ) -> Result<(Var, Terms, Option<SelectionMasks>, Vec<Tensor>)> {
        let mut q = Vec::new();
        for (k, x) in batch.images.iter().enumerate() {
            let xv = g.constant(x.clone());
            q.push(self.model.forward(g, k, xv, opts, updates)?.probs);
        }
        let probs: Vec<Tensor> = q.iter().map(|&v| g.value(v).clone()).collect();
        let (b, h, w) = (batch.labels.batch(), batch.labels.height(), batch.labels.width());
        match self.objective {
            Objective::Single { .. } => {
                let ones = WeightMask::ones(MaskRole::LabelBased, b, h, w);
                let s = seg_loss(g, q[0], &batch.targets, &ones)?;
                let v = g.value(s.total).item();
                let terms = Terms {
                    total: v,
                    seg: [v, 0.0],
                    kl: [0.0; 2],
                };
                Ok((s.total, terms, None, probs))
            }
            Objective::Pair { selection } => {
                let masks = match (selection, alpha_gamma) {
                    (true, Some((alpha, gamma))) => Some(select([&probs[0], &probs[1]], &batch.labels, alpha, gamma)?),
                    _ => None,
                };
                let ones_l = WeightMask::ones(MaskRole::LabelBased, b, h, w);
                let ones_e = WeightMask::ones(MaskRole::EntityBased, b, h, w);
                let mm = |d: usize| match &masks {
                    Some(m) => ModalityMasks {
                        label: &m.w_l[d],
                        entity: &m.w_e[d],
                    },
                    None => ModalityMasks {
                        label: &ones_l,
                        entity: &ones_e,
                    },
                };
                let t = total_loss(g, [q[0], q[1]], &batch.targets, [mm(0), mm(1)], self.weights)?;
                let terms = Terms {
                    total: g.value(t.total).item(),
                    seg: [g.value(t.seg[0].total).item(), g.value(t.seg[1].total).item()],
                    kl: [g.value(t.kl[0].value).item(), g.value(t.kl[1].value).item()],
                };
                Ok((t.total, terms, masks, probs))
            }
        }
    }

    fn frozen(&self) -> bool {
        matches!(self.objective, Objective::Single { frozen: true })
    }

    /// One pass over the shuffled training split, then validation and a
    /// scheduler update.
    pub fn run_epoch(&mut self, mut hook: Option<&mut MaskHook<'_>>) -> Result<&EpochRow> {
        let start = Instant::now();
        let epoch = self.epoch;
        let (alpha, gamma) = self.schedule.at(epoch);
        let lr = self.plateau.lr;
        let mut rng = stream2(self.seed, EPOCH_STREAM, epoch as u64);
        let mut order: Vec<usize> = self.view.train.to_vec();
        if order.is_empty() {
            return Err(Error::data("training split is empty"));
        }
        order.shuffle(&mut rng);
        let opts = ForwardOpts {
            train: true,
            freeze_encoder: self.frozen(),
        };
        let mut sum = Terms::default();
        let mut steps = 0;
        let mut zero_steps = 0;
        for (step, chunk) in order.chunks(self.batch_size).enumerate() {
            let locs: Vec<&Location> = chunk.iter().map(|&l| &self.view.locations[l]).collect();
            let batch = self.batch_inputs(&locs, &mut rng)?;
            let mut g = Graph::new();
            let mut updates = BnUpdates::default();
            let (loss, terms, masks, _) = self.objective(&mut g, &batch, opts, Some((alpha, gamma)), &mut updates)?;
            if !terms.total.is_finite() {
                return Err(diverged(epoch, step, &terms));
            }
            if let Some(m) = &masks {
                if !m.zero_threshold_classes.is_empty() {
                    zero_steps += 1;
                }
                if let Some(h) = hook.as_deref_mut() {
                    h(epoch, step, m)?;
                }
            }
            g.backward(loss)?;
            let grads = g.param_grads();
            self.adam
                .update(self.model.params_mut(), &grads, lr)
                .map_err(|e| Error::Diverged {
                    epoch,
                    step,
                    detail: e.to_string(),
                })?;
            self.model.apply_batch_stats(updates);
            sum.add(&terms);
            steps += 1;
        }
        sum.scale(1.0 / steps as f64);
        let (val, val_miou) = self.validate()?;
        if !val.total.is_finite() {
            return Err(diverged(epoch, usize::MAX, &val));
        }
        self.plateau.observe(val.total);
        self.epoch += 1;
        self.log.push(EpochRow {
            epoch,
            lr,
            alpha,
            gamma,
            train: sum,
            val,
            val_miou,
            zero_threshold_steps: zero_steps,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        Ok(self.log.last().expect("just pushed"))
    }

    /// Validation loss with all masks at one, plus mIoU against the
    /// validation labels.
    fn validate(&self) -> Result<(Terms, [f64; 2])> {
        let Some(batch) = self.val_inputs()? else {
            return Ok((Terms::default(), [f64::NAN; 2]));
        };
        let mut g = Graph::new();
        let (_, terms, _, probs) = self.objective(&mut g, &batch, ForwardOpts::eval(), None, &mut BnUpdates::default())?;
        let mut miou = [f64::NAN; 2];
        for (k, p) in probs.iter().enumerate() {
            let mut cm = ConfusionMatrix::new(self.view.spec.num_classes);
            cm.accumulate(&argmax_labels(p)?, &batch.labels)?;
            miou[k] = cm.report().miou;
        }
        Ok((terms, miou))
    }
}

fn diverged(epoch: usize, step: usize, t: &Terms) -> Error {
    Error::Diverged {
        epoch,
        step,
        detail: format!(
            "non-finite loss (total {}, seg {:?}, kl {:?})",
            t.total, t.seg, t.kl
        ),
    }
}

struct Batch {
    /// One `[B, ch, H, W]` tensor per model modality.
    images: Vec<Tensor>,
    labels: LabelMap,
    targets: SoftLabel,
}

impl Batch {
    fn assemble(images: Vec<Vec<Tensor>>, labels: Vec<LabelMap>, targets: Vec<SoftLabel>) -> Result<Self> {
        let images = images.iter().map(|v| stack_images(v)).collect::<Result<Vec<_>>>()?;
        let (_, c, h, w) = targets[0].dims();
        let data: Vec<f64> = targets.iter().flat_map(|t| t.tensor().data().iter().copied()).collect();
        Ok(Batch {
            images,
            labels: LabelMap::stack(&labels)?,
            targets: SoftLabel::new(Tensor::new(vec![targets.len(), c, h, w], data)?)?,
        })
    }
}

/// Trains a model (pair) from scratch on the noisy training split.
pub fn pretrain(view: TrainView<'_>, cfg: &TrainConfig) -> Result<(ModelPair, RunLog)> {
    Trainer::new(view, cfg)?.run(None)
}

/// Trains a fresh decoder (and, unless frozen, the encoder) on a downstream
/// dataset whose training labels are clean.
pub fn transfer(view: TrainView<'_>, init: TransferInit<'_>, cfg: &TransferConfig) -> Result<(ModelPair, RunLog)> {
    Trainer::new_transfer(view, init, cfg)?.run(None)
}
