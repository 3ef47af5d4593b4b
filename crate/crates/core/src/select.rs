//! Cross-modal sample selection: confidence masks, cross-modal enhancement,
//! per-class thresholding and the α/γ ramp schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, UNLABELED};
use crate::loss::{MaskRole, WeightMask};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfKind {
    Label,
    Entity,
    EnhancedLabel,
    EnhancedEntity,
}

impl ConfKind {
    fn is_label(self) -> bool {
        matches!(self, ConfKind::Label | ConfKind::EnhancedLabel)
    }

    fn enhanced(self) -> ConfKind {
        if self.is_label() {
            ConfKind::EnhancedLabel
        } else {
            ConfKind::EnhancedEntity
        }
    }
}

/// Per-pixel confidences in `[0, 1]`, laid out `[batch, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfMask {
    kind: ConfKind,
    batch: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ConfMask {
    pub fn new(kind: ConfKind, batch: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != batch * height * width {
            return Err(Error::dim("conf_mask", "value count does not match extents"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain("conf_mask", "confidences must lie in [0, 1]"));
        }
        Ok(ConfMask {
            kind,
            batch,
            height,
            width,
            values,
        })
    }

    pub fn kind(&self) -> ConfKind {
        self.kind
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.batch, self.height, self.width], self.values.clone()).expect("extents checked")
    }
}

/// `f_l = p[y]`; zero at unlabeled pixels.
pub fn label_confidence(p: &Tensor, y: &LabelMap) -> Result<ConfMask> {
    let (b, c, h, w) = p.dims4("label_confidence")?;
    if (y.batch(), y.height(), y.width()) != (b, h, w) {
        return Err(Error::dim("label_confidence", "label map does not match predictions"));
    }
    y.check_classes(c)?;
    let px = h * w;
    let d = p.data();
    let values = (0..b * px)
        .map(|j| {
            let (bi, i) = (j / px, j % px);
            match y.data()[j] {
                UNLABELED => 0.0,
                k => d[(bi * c + k as usize) * px + i].clamp(0.0, 1.0),
            }
        })
        .collect();
    ConfMask::new(ConfKind::Label, b, h, w, values)
}

/// `f_e = 1 + sum p log p / log C`, i.e. one minus the normalized entropy.
pub fn entity_confidence(p: &Tensor) -> Result<ConfMask> {
    let (b, c, h, w) = p.dims4("entity_confidence")?;
    let px = h * w;
    let d = p.data();
    let k = (c as f64).ln();
    let values = (0..b * px)
        .map(|j| {
            if c == 1 {
                return 1.0;
            }
            let (bi, i) = (j / px, j % px);
            let neg_h: f64 = (0..c)
                .map(|cl| d[(bi * c + cl) * px + i])
                .filter(|&v| v > 0.0)
                .map(|v| v * v.ln())
                .sum();
            (1.0 + neg_h / k).clamp(0.0, 1.0)
        })
        .collect();
    ConfMask::new(ConfKind::Entity, b, h, w, values)
}

/// `F'_d = F_d (1 + F_d') / 2`.
pub fn enhance(own: &ConfMask, other: &ConfMask) -> Result<ConfMask> {
    if own.kind.is_label() != other.kind.is_label() {
        return Err(Error::contract("cannot enhance label-based confidence with entity-based confidence"));
    }
    if own.dims() != other.dims() {
        return Err(Error::dim("enhance", "confidence masks differ in shape"));
    }
    let values = own
        .values
        .iter()
        .zip(&other.values)
        .map(|(&f, &o)| 0.5 * f * (1.0 + o))
        .collect();
    let (b, h, w) = own.dims();
    ConfMask::new(own.kind.enhanced(), b, h, w, values)
}

/// A label-based weight mask plus the classes whose threshold was zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Thresholded {
    pub weights: WeightMask,
    pub zero_threshold_classes: Vec<u8>,
}

/// Per class, the `max(1, floor(alpha N_c))`-th largest confidence among pixels
/// labeled `c` in the batch becomes the threshold `t_c`; weights are
/// `min(1, f / t_c)`, and unlabeled pixels get 0.
pub fn threshold_label(conf: &ConfMask, y: &LabelMap, alpha: f64) -> Result<Thresholded> {
    if !conf.kind.is_label() {
        return Err(Error::contract("thresholding expects a label-based confidence mask"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::domain("threshold_label", format!("alpha {alpha} outside (0, 1]")));
    }
    let (b, h, w) = conf.dims();
    if (y.batch(), y.height(), y.width()) != (b, h, w) {
        return Err(Error::dim("threshold_label", "label map does not match confidence mask"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 256];
    for (j, &lab) in y.data().iter().enumerate() {
        if lab != UNLABELED {
            by_class[lab as usize].push(j);
        }
    }
    let mut weights = vec![0.0; b * h * w];
    let mut flagged = Vec::new();
    for (class, members) in by_class.iter().enumerate().filter(|(_, m)| !m.is_empty()) {
        let mut vals: Vec<f64> = members.iter().map(|&j| conf.values[j]).collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        let k = ((alpha * vals.len() as f64).floor() as usize).max(1);
        let t = vals[k - 1];
        if t <= 0.0 {
            flagged.push(class as u8);
            for &j in members {
                weights[j] = 1.0;
            }
        } else {
            for &j in members {
                weights[j] = (conf.values[j] / t).min(1.0);
            }
        }
    }
    Ok(Thresholded {
        weights: WeightMask::new(MaskRole::LabelBased, b, h, w, weights)?,
        zero_threshold_classes: flagged,
    })
}

/// `w_e = (1 - gamma) + gamma f'_e`.
pub fn weight_entity(conf: &ConfMask, gamma: f64) -> Result<WeightMask> {
    if conf.kind.is_label() {
        return Err(Error::contract("entity weighting expects an entity-based confidence mask"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::domain("weight_entity", format!("gamma {gamma} outside [0, 1]")));
    }
    let (b, h, w) = conf.dims();
    let values = conf
        .values
        .iter()
        .map(|&f| ((1.0 - gamma) + gamma * f).clamp(0.0, 1.0))
        .collect();
    WeightMask::new(MaskRole::EntityBased, b, h, w, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSchedule {
    pub alpha0: f64,
    pub ramp_epochs: usize,
}

impl Default for SelectionSchedule {
    fn default() -> Self {
        SelectionSchedule {
            alpha0: 0.5,
            ramp_epochs: 24,
        }
    }
}

impl SelectionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0 <= 1.0) {
            return Err(Error::config(format!("alpha0 {} outside (0, 1]", self.alpha0)));
        }
        Ok(())
    }

    /// `(alpha, gamma)` at `epoch`: alpha decays exponentially from 1 to
    /// `alpha0`, gamma rises linearly from 0 to 1, both over `ramp_epochs`.
    pub fn at(&self, epoch: usize) -> (f64, f64) {
        let frac = if self.ramp_epochs == 0 {
            1.0
        } else {
            epoch.min(self.ramp_epochs) as f64 / self.ramp_epochs as f64
        };
        (self.alpha0.powf(frac), frac)
    }
}

/// Every intermediate mask of one selection step, per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMasks {
    pub f_l: [ConfMask; 2],
    pub f_e: [ConfMask; 2],
    pub fp_l: [ConfMask; 2],
    pub fp_e: [ConfMask; 2],
    pub w_l: [WeightMask; 2],
    pub w_e: [WeightMask; 2],
    pub zero_threshold_classes: Vec<u8>,
}

impl SelectionMasks {
    /// `(name, tensor)` pairs such as `W_l1`, for dumping.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for d in 0..2 {
            let n = d + 1;
            out.push((format!("F_l{n}"), self.f_l[d].to_tensor()));
            out.push((format!("F_e{n}"), self.f_e[d].to_tensor()));
            out.push((format!("Fp_l{n}"), self.fp_l[d].to_tensor()));
            out.push((format!("Fp_e{n}"), self.fp_e[d].to_tensor()));
            out.push((format!("W_l{n}"), self.w_l[d].to_tensor()));
            out.push((format!("W_e{n}"), self.w_e[d].to_tensor()));
        }
        out
    }
}

/// Runs the full pipeline on detached predictions of both modalities.
pub fn select(p: [&Tensor; 2], y: &LabelMap, alpha: f64, gamma: f64) -> Result<SelectionMasks> {
    let f_l = [label_confidence(p[0], y)?, label_confidence(p[1], y)?];
    let f_e = [entity_confidence(p[0])?, entity_confidence(p[1])?];
    let fp_l = [enhance(&f_l[0], &f_l[1])?, enhance(&f_l[1], &f_l[0])?];
    let fp_e = [enhance(&f_e[0], &f_e[1])?, enhance(&f_e[1], &f_e[0])?];
    let t1 = threshold_label(&fp_l[0], y, alpha)?;
    let t2 = threshold_label(&fp_l[1], y, alpha)?;
    let mut zero_threshold_classes = t1.zero_threshold_classes;
    zero_threshold_classes.extend(t2.zero_threshold_classes);
    zero_threshold_classes.sort_unstable();
    zero_threshold_classes.dedup();
    let w_e = [weight_entity(&fp_e[0], gamma)?, weight_entity(&fp_e[1], gamma)?];
    Ok(SelectionMasks {
        f_l,
        f_e,
        fp_l,
        fp_e,
        w_l: [t1.weights, t2.weights],
        w_e,
        zero_threshold_classes,
    })
}
