//! Built-in oracle suite: closed-form golden values for every loss, mask,
//! smoothing and metric formula, plus a finite-difference gradient check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::Result;
use crate::eval::ConfusionMatrix;
use crate::labels::{LabelMap, SoftLabel};
use crate::loss::{ce_loss, dice_loss, kl_consistency, total_loss, LossWeights, MaskRole, ModalityMasks, WeightMask};
use crate::model::{BnUpdates, ForwardOpts, FusionMode, FusionSpec, MiniUNetConfig, ModelPair};
use crate::select::{enhance, entity_confidence, threshold_label, weight_entity, ConfKind, ConfMask, SelectionSchedule};
use crate::smooth::{smooth, SeasonalLabels, SmoothingParams};
use crate::tensor::Tensor;
use crate::train::Adam;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn close(name: &'static str, got: &[f64], want: &[f64], tol: f64) -> Check {
    let passed = got.len() == want.len() && got.iter().zip(want).all(|(g, w)| (g - w).abs() <= tol);
    Check {
        name,
        passed,
        detail: format!("got {got:?}, want {want:?}"),
    }
}

fn pixels(c: usize, rows: &[&[f64]]) -> Tensor {
    let n = rows.len();
    let mut d = vec![0.0; c * n];
    for (i, r) in rows.iter().enumerate() {
        for k in 0..c {
            d[k * n + i] = r[k];
        }
    }
    Tensor::new(vec![1, c, 1, n], d).expect("sizes by construction")
}

fn scalar_loss(
    q: &[f64],
    z: &[f64],
    f: impl Fn(&mut Graph, crate::autodiff::Var, &SoftLabel, &WeightMask) -> Result<crate::loss::LossTerm>,
) -> Result<f64> {
    let mut g = Graph::new();
    let qv = g.variable(pixels(q.len(), &[q]));
    let zt = SoftLabel::new(pixels(z.len(), &[z]))?;
    let w = WeightMask::ones(MaskRole::LabelBased, 1, 1, 1);
    let t = f(&mut g, qv, &zt, &w)?;
    Ok(g.value(t.value).item())
}

fn golden() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    out.push(close("ce -ln 0.5", &[scalar_loss(&[0.5, 0.5], &[1.0, 0.0], ce_loss)?], &[0.693147], 1e-6));
    out.push(close("ce entropy", &[scalar_loss(&[0.3, 0.7], &[0.3, 0.7], ce_loss)?], &[0.610864], 1e-6));
    out.push(close("dice", &[scalar_loss(&[0.6, 0.4], &[1.0, 0.0], dice_loss)?], &[0.4], 1e-9));
    let kl = {
        let mut g = Graph::new();
        let p = g.constant(pixels(2, &[&[1.0, 0.0]]));
        let q = g.variable(pixels(2, &[&[0.5, 0.5]]));
        let w = WeightMask::ones(MaskRole::EntityBased, 1, 1, 1);
        let t = kl_consistency(&mut g, p, q, &w)?;
        g.value(t.value).item()
    };
    out.push(close("kl ln 2", &[kl], &[std::f64::consts::LN_2], 1e-9));

    let fe = entity_confidence(&pixels(2, &[&[0.9, 0.1]]))?;
    out.push(close("entity confidence", fe.values(), &[0.531004], 1e-6));
    let half = ConfMask::new(ConfKind::Label, 1, 1, 1, vec![0.5])?;
    out.push(close("enhance 3/8", enhance(&half, &half)?.values(), &[0.375], 1e-12));
    let a = ConfMask::new(ConfKind::Label, 1, 1, 1, vec![0.8])?;
    let b = ConfMask::new(ConfKind::Label, 1, 1, 1, vec![0.2])?;
    out.push(close(
        "enhance asymmetry",
        &[enhance(&a, &b)?.values()[0], enhance(&b, &a)?.values()[0]],
        &[0.48, 0.18],
        1e-12,
    ));
    let f = ConfMask::new(ConfKind::EnhancedLabel, 1, 1, 4, vec![0.9, 0.8, 0.4, 0.2])?;
    let th = threshold_label(&f, &LabelMap::single(1, 4, vec![0; 4])?, 0.5)?;
    out.push(close("threshold", th.weights.values(), &[1.0, 1.0, 0.5, 0.25], 1e-12));
    let fe = ConfMask::new(ConfKind::EnhancedEntity, 1, 1, 1, vec![0.4])?;
    out.push(close("entity weight", weight_entity(&fe, 0.5)?.values(), &[0.7], 1e-12));
    let s = SelectionSchedule {
        alpha0: 0.5,
        ramp_epochs: 80,
    };
    let (a0, g0) = s.at(0);
    let (a40, _) = s.at(40);
    let (a80, g80) = s.at(80);
    out.push(close("schedule", &[a0, g0, a40, a80, g80], &[1.0, 0.0, 0.707107, 0.5, 1.0], 1e-6));

    let z = LabelMap::filled(1, 4, 4, 0);
    let seasons = SeasonalLabels::new(vec![z.clone(); 4])?;
    let zp = smooth(&z, &seasons, 2, &SmoothingParams::default())?;
    let d = zp.tensor().data();
    out.push(close("smoothing pixel", &[d[5], d[16 + 5]], &[0.975, 0.025], 1e-12));

    let r = ConfusionMatrix::from_counts(&[vec![2, 0], vec![1, 1]])?.report();
    out.push(close(
        "metrics",
        &[r.oa, r.aa, r.miou, r.mf1],
        &[0.75, 0.75, 0.583333, 0.733333],
        1e-6,
    ));

    let cfg = MiniUNetConfig {
        in_channels: vec![1],
        base_width: 1,
        depth: 1,
        num_classes: 2,
    };
    let mut m = ModelPair::build(cfg, FusionSpec::new(FusionMode::Single), 0)?;
    let id = m.params().ids().next().expect("model has parameters");
    let before = m.params().get(id).data()[0];
    let n = m.params().get(id).numel();
    let mut adam = Adam::new(m.params());
    adam.update(m.params_mut(), &[(id, Tensor::full(&[n], 1.0))], 1e-3)?;
    out.push(close("adam first step", &[m.params().get(id).data()[0] - before], &[-9.99999990e-4], 1e-12));
    Ok(out)
}

/// Largest relative error between analytic and central-difference
/// gradients of the full objective over sampled parameter entries.
pub fn gradient_check(fusion: FusionMode, seed: u64) -> Result<f64> {
    let cfg = MiniUNetConfig {
        in_channels: vec![2, 2],
        base_width: 2,
        depth: 1,
        num_classes: 2,
    };
    let model = ModelPair::build(cfg, FusionSpec::new(fusion), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9d);
    let mut img = || Tensor::new(vec![2, 2, 8, 8], (0..256).map(|_| rng.random_range(0.0..1.0)).collect());
    let x = [img()?, img()?];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1b);
    let y = LabelMap::new(2, 8, 8, (0..128).map(|_| rng.random_range(0..2u8)).collect())?;
    let z = y.one_hot(2)?;
    let wl = WeightMask::new(MaskRole::LabelBased, 2, 8, 8, (0..128).map(|_| rng.random_range(0.1..1.0)).collect())?;
    let we = WeightMask::new(MaskRole::EntityBased, 2, 8, 8, (0..128).map(|_| rng.random_range(0.1..1.0)).collect())?;
    let forward = |m: &ModelPair, g: &mut Graph| -> Result<[crate::autodiff::Var; 2]> {
        let mut q = Vec::new();
        for (d, xd) in x.iter().enumerate() {
            let xv = g.constant(xd.clone());
            q.push(m.forward(g, d, xv, ForwardOpts::eval(), &mut BnUpdates::default())?.probs);
        }
        Ok([q[0], q[1]])
    };
    let mut g = Graph::new();
    let q = forward(&model, &mut g)?;
    let p = [g.value(q[0]).clone(), g.value(q[1]).clone()];
    let masks = || [ModalityMasks { label: &wl, entity: &we }, ModalityMasks { label: &wl, entity: &we }];
    let t = total_loss(&mut g, q, &z, masks(), LossWeights::default())?;
    g.backward(t.total)?;
    let grads = g.param_grads();
    // the consistency targets stay at their unperturbed values
    let eval = |m: &ModelPair| -> Result<f64> {
        let mut g = Graph::new();
        let q = forward(m, &mut g)?;
        let s1 = crate::loss::seg_loss(&mut g, q[0], &z, &wl)?.total;
        let s2 = crate::loss::seg_loss(&mut g, q[1], &z, &wl)?.total;
        let p1 = g.constant(p[0].clone());
        let p2 = g.constant(p[1].clone());
        let k1 = kl_consistency(&mut g, p1, q[1], &we)?.value;
        let k2 = kl_consistency(&mut g, p2, q[0], &we)?.value;
        let a = g.add(s1, s2)?;
        let b = g.add(k1, k2)?;
        let l = g.add(a, b)?;
        Ok(g.value(l).item())
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (id, grad) in &grads {
        let n = grad.numel();
        for k in [0, n / 2, n - 1] {
            let mut plus = model.clone();
            plus.params_mut().get_mut(*id).data_mut()[k] += h;
            let mut minus = model.clone();
            minus.params_mut().get_mut(*id).data_mut()[k] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let an = grad.data()[k];
            let scale = fd.abs().max(an.abs());
            if scale > 1e-7 {
                worst = worst.max((fd - an).abs() / scale);
            }
        }
    }
    Ok(worst)
}

/// Runs every check; errors count as failures.
pub fn run_selftest() -> Vec<Check> {
    let mut out = match golden() {
        Ok(v) => v,
        Err(e) => vec![Check {
            name: "golden values",
            passed: false,
            detail: e.to_string(),
        }],
    };
    for (name, fusion) in [("gradients late", FusionMode::Late), ("gradients middle", FusionMode::Middle)] {
        out.push(match gradient_check(fusion, 1) {
            Ok(err) => Check {
                name,
                passed: err < 1e-4,
                detail: format!("max relative error {err:.3e}"),
            },
            Err(e) => Check {
                name,
                passed: false,
                detail: e.to_string(),
            },
        });
    }
    out
}
