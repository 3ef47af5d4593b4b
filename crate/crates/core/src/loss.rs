//! Segmentation (cross-entropy + Dice) and KL consistency losses, each
//! weighted per pixel by a selection mask.
//!
//! Cross-entropy and KL are weighted averages: the weighted sum is divided by
//! the total weight. Dice is a single ratio over all pixels and classes.
//! Unlabeled pixels never contribute to the segmentation terms.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::labels::SoftLabel;
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logarithms.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskRole {
    /// `W_l`, weighs the segmentation loss.
    LabelBased,
    /// `W_e`, weighs the consistency loss.
    EntityBased,
}

/// Per-pixel loss weights in `[0, 1]`, laid out `[batch, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMask {
    role: MaskRole,
    batch: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl WeightMask {
    pub fn new(role: MaskRole, batch: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != batch * height * width {
            return Err(Error::dim("weight_mask", "value count does not match extents"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain("weight_mask", "weights must lie in [0, 1]"));
        }
        Ok(WeightMask {
            role,
            batch,
            height,
            width,
            values,
        })
    }

    pub fn ones(role: MaskRole, batch: usize, height: usize, width: usize) -> Self {
        WeightMask {
            role,
            batch,
            height,
            width,
            values: vec![1.0; batch * height * width],
        }
    }

    pub fn role(&self) -> MaskRole {
        self.role
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

/// A scalar loss node. `degenerate` is set when the normalizer vanished and
/// the term was defined as zero.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub value: Var,
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct SegLoss {
    pub ce: LossTerm,
    pub dice: LossTerm,
    pub total: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    pub seg: [SegLoss; 2],
    /// `kl[0]` is `L_c(P1 || Q2)`, `kl[1]` is `L_c(P2 || Q1)`.
    pub kl: [LossTerm; 2],
    pub total: Var,
}

fn check_shapes(g: &Graph, q: Var, z: &Tensor, w: &WeightMask, op: &'static str) -> Result<(usize, usize, usize)> {
    let (b, c, h, wd) = g.value(q).dims4(op)?;
    if z.shape() != [b, c, h, wd] {
        return Err(Error::dim(op, format!("target {:?} vs prediction {:?}", z.shape(), g.value(q).shape())));
    }
    if w.dims() != (b, h, wd) {
        return Err(Error::dim(op, format!("weights {:?} vs prediction {:?}", w.dims(), g.value(q).shape())));
    }
    Ok((b, c, h * wd))
}

/// `per_pixel[b, i]` broadcast across classes times `per_class[b, c, i]`.
fn expand(per_pixel: &[f64], per_class: Option<&[f64]>, b: usize, c: usize, p: usize) -> Tensor {
    let mut out = vec![0.0; b * c * p];
    for bi in 0..b {
        for k in 0..c {
            for i in 0..p {
                let idx = (bi * c + k) * p + i;
                let s = per_class.map_or(1.0, |z| z[idx]);
                out[idx] = per_pixel[bi * p + i] * s;
            }
        }
    }
    Tensor::new(vec![b, c, p], out).expect("sizes by construction")
}

fn zero_term(g: &mut Graph) -> LossTerm {
    LossTerm {
        value: g.constant(Tensor::scalar(0.0)),
        degenerate: true,
    }
}

fn clamped_log(g: &mut Graph, q: Var) -> Result<Var> {
    let c = g.clamp_min(q, LOG_EPS);
    Ok(g.log(c))
}

/// Weighted cross-entropy `-sum w z log q / sum_{labeled} w`.
pub fn ce_loss(g: &mut Graph, q: Var, z: &SoftLabel, w: &WeightMask) -> Result<LossTerm> {
    let (b, c, p) = check_shapes(g, q, z.tensor(), w, "ce_loss")?;
    let labeled = z.labeled_mask();
    let eff: Vec<f64> = w.values().iter().zip(&labeled).map(|(a, l)| a * l).collect();
    let norm: f64 = eff.iter().sum();
    if norm <= 0.0 {
        return Ok(zero_term(g));
    }
    let coef = expand(&eff, Some(z.tensor().data()), b, c, p).reshape(g.value(q).shape().to_vec())?;
    let logq = clamped_log(g, q)?;
    let coef = g.constant(coef);
    let prod = g.mul(logq, coef)?;
    let s = g.sum(prod);
    Ok(LossTerm {
        value: g.mul_scalar(s, -1.0 / norm),
        degenerate: false,
    })
}

/// Weighted Dice `1 - 2 sum w z q / sum w (z + q)` over labeled pixels.
pub fn dice_loss(g: &mut Graph, q: Var, z: &SoftLabel, w: &WeightMask) -> Result<LossTerm> {
    let (b, c, p) = check_shapes(g, q, z.tensor(), w, "dice_loss")?;
    let labeled = z.labeled_mask();
    let eff: Vec<f64> = w.values().iter().zip(&labeled).map(|(a, l)| a * l).collect();
    if eff.iter().all(|&v| v == 0.0) {
        return Ok(zero_term(g));
    }
    let shape = g.value(q).shape().to_vec();
    let wz = expand(&eff, Some(z.tensor().data()), b, c, p).reshape(shape.clone())?;
    let z_mass = wz.sum();
    let wq = expand(&eff, None, b, c, p).reshape(shape)?;
    let wz = g.constant(wz);
    let wq = g.constant(wq);
    let inter = g.mul(q, wz)?;
    let inter = g.sum(inter);
    let mass = g.mul(q, wq)?;
    let mass = g.sum(mass);
    let denom = g.add_scalar(mass, z_mass);
    let ratio = g.div(inter, denom)?;
    let scaled = g.mul_scalar(ratio, -2.0);
    Ok(LossTerm {
        value: g.add_scalar(scaled, 1.0),
        degenerate: false,
    })
}

pub fn seg_loss(g: &mut Graph, q: Var, z: &SoftLabel, w: &WeightMask) -> Result<SegLoss> {
    let ce = ce_loss(g, q, z, w)?;
    let dice = dice_loss(g, q, z, w)?;
    let total = g.add(ce.value, dice.value)?;
    Ok(SegLoss { ce, dice, total })
}

/// Weighted `KL(P || Q) = -sum w p log(q / p) / sum w`, with `0 log 0 = 0`.
/// `p` must be a detached node; gradients reach only `q`'s producer.
pub fn kl_consistency(g: &mut Graph, p: Var, q: Var, w: &WeightMask) -> Result<LossTerm> {
    if g.requires_grad(p) {
        return Err(Error::contract("consistency target must be detached"));
    }
    let (b, c, px) = check_shapes(g, q, g.value(p), w, "kl_consistency")?;
    let norm: f64 = w.values().iter().sum();
    if norm <= 0.0 {
        return Ok(zero_term(g));
    }
    let pd = g.value(p).data();
    let wp = expand(w.values(), Some(pd), b, c, px);
    let entropy_part: f64 = wp
        .data()
        .iter()
        .zip(pd)
        .map(|(&a, &pv)| if pv > 0.0 { a * pv.ln() } else { 0.0 })
        .sum();
    let wp = wp.reshape(g.value(q).shape().to_vec())?;
    let logq = clamped_log(g, q)?;
    let wp = g.constant(wp);
    let cross = g.mul(logq, wp)?;
    let cross = g.sum(cross);
    let neg = g.mul_scalar(cross, -1.0);
    let kl = g.add_scalar(neg, entropy_part);
    Ok(LossTerm {
        value: g.mul_scalar(kl, 1.0 / norm),
        degenerate: false,
    })
}

/// Weights of the four terms of the multi-modal objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { consistency: 1.0 }
    }
}

/// Masks for one modality: `W_l` for its segmentation loss and `W_e` for
/// the consistency term that uses its detached prediction as target.
pub struct ModalityMasks<'a> {
    pub label: &'a WeightMask,
    pub entity: &'a WeightMask,
}

/// `L_s(Q1) + L_s(Q2) + L_c(P1 || Q2) + L_c(P2 || Q1)` with `P_d = detach(Q_d)`.
pub fn total_loss(
    g: &mut Graph,
    q: [Var; 2],
    z: &SoftLabel,
    masks: [ModalityMasks<'_>; 2],
    weights: LossWeights,
) -> Result<TotalLoss> {
    let s1 = seg_loss(g, q[0], z, masks[0].label)?;
    let s2 = seg_loss(g, q[1], z, masks[1].label)?;
    let p1 = g.detach(q[0]);
    let p2 = g.detach(q[1]);
    let k12 = kl_consistency(g, p1, q[1], masks[0].entity)?;
    let k21 = kl_consistency(g, p2, q[0], masks[1].entity)?;
    let seg = g.add(s1.total, s2.total)?;
    let kl = g.add(k12.value, k21.value)?;
    let kl = g.mul_scalar(kl, weights.consistency);
    let total = g.add(seg, kl)?;
    Ok(TotalLoss {
        seg: [s1, s2],
        kl: [k12, k21],
        total,
    })
}
