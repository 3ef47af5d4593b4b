use nlss_core::autodiff::{Graph, ParamId};
use nlss_core::data::{agreement_accuracy, normalize, NormStats};
use nlss_core::error::Result;
use nlss_core::eval::ConfusionMatrix;
use nlss_core::labels::{LabelMap, SoftLabel};
use nlss_core::loss::{ce_loss, dice_loss, kl_consistency, MaskRole, WeightMask};
use nlss_core::model::{FusionMode, FusionSpec, MiniUNetConfig, ModelPair};
use nlss_core::select::{enhance, ConfKind, ConfMask, entity_confidence, label_confidence, threshold_label, weight_entity, SelectionSchedule};
use nlss_core::smooth::{flat_kernel, gaussian_kernel, smooth, spatial_mask, temporal_mask, SeasonalLabels, SmoothingParams};
use nlss_core::tensor::Tensor;
use nlss_core::train::Adam;

use crate::{Outcome, Verdict};

struct Book {
    checked: usize,
    failures: Vec<String>,
}

impl Book {
    fn close(&mut self, name: &str, got: f64, want: f64, tol: f64) {
        self.checked += 1;
        if !((got - want).abs() <= tol) {
            self.failures.push(format!("{name}: got {got}, want {want}"));
        }
    }
}

fn pixel(q: &[f64]) -> Tensor {
    Tensor::new(vec![1, q.len(), 1, 1], q.to_vec()).unwrap()
}

fn soft(z: &[f64]) -> SoftLabel {
    SoftLabel::new(pixel(z)).unwrap()
}

fn one() -> WeightMask {
    WeightMask::ones(MaskRole::LabelBased, 1, 1, 1)
}

fn loss_values(b: &mut Book) -> Result<()> {
    let mut g = Graph::new();
    let q = g.constant(pixel(&[0.5, 0.5]));
    let v = ce_loss(&mut g, q, &soft(&[1.0, 0.0]), &one())?.value;
    b.close("ce one-hot", g.value(v).item(), -(0.5f64).ln(), 1e-9);

    let q = g.constant(pixel(&[0.3, 0.7]));
    let v = ce_loss(&mut g, q, &soft(&[0.3, 0.7]), &one())?.value;
    b.close("ce self-entropy", g.value(v).item(), -(0.3 * 0.3f64.ln() + 0.7 * 0.7f64.ln()), 1e-9);
    b.close("ce self-entropy printed", g.value(v).item(), 0.610864, 1e-6);

    let q = g.constant(pixel(&[0.6, 0.4]));
    let v = dice_loss(&mut g, q, &soft(&[1.0, 0.0]), &one())?.value;
    b.close("dice", g.value(v).item(), 0.4, 1e-9);

    let p = g.constant(pixel(&[1.0, 0.0]));
    let q = g.constant(pixel(&[0.5, 0.5]));
    let v = kl_consistency(&mut g, p, q, &one())?.value;
    b.close("kl", g.value(v).item(), std::f64::consts::LN_2, 1e-9);
    Ok(())
}

fn selection_values(b: &mut Book) -> Result<()> {
    let f = entity_confidence(&pixel(&[0.9, 0.1]))?;
    let h = -(0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
    b.close("entity confidence", f.values()[0], 1.0 - h / 2f64.ln(), 1e-9);
    b.close("entity confidence printed", f.values()[0], 0.531004, 1e-6);

    let y = LabelMap::single(1, 1, vec![0])?;
    let conf = |v: f64| label_confidence(&pixel(&[v, 1.0 - v]), &y);
    let half = enhance(&conf(0.5)?, &conf(0.5)?)?;
    b.close("enhancement at one half", half.values()[0], 3.0 / 8.0, 1e-12);
    let hi = enhance(&conf(0.8)?, &conf(0.2)?)?;
    let lo = enhance(&conf(0.2)?, &conf(0.8)?)?;
    b.close("enhancement 0.8 by 0.2", hi.values()[0], 0.8 * 1.2 / 2.0, 1e-12);
    b.close("enhancement 0.2 by 0.8", lo.values()[0], 0.2 * 1.8 / 2.0, 1e-12);

    let fp = [0.9, 0.8, 0.4, 0.2];
    let p = Tensor::new(vec![1, 2, 1, 4], fp.iter().copied().chain(fp.iter().map(|v| 1.0 - v)).collect())?;
    let y = LabelMap::new(1, 1, 4, vec![0; 4])?;
    let own = label_confidence(&p, &y)?;
    // enhancing by a partner of confidence 1 leaves the values unchanged
    let ones = label_confidence(&Tensor::new(vec![1, 2, 1, 4], [1.0; 4].into_iter().chain([0.0; 4]).collect())?, &y)?;
    let t = threshold_label(&enhance(&own, &ones)?, &y, 0.5)?;
    for (k, want) in [1.0, 1.0, 0.5, 0.25].into_iter().enumerate() {
        b.close("threshold weight", t.weights.values()[k], want, 1e-9);
    }

    let e4 = ConfMask::new(ConfKind::EnhancedEntity, 1, 1, 1, vec![0.4])?;
    b.close("entity weight", weight_entity(&e4, 0.5)?.values()[0], 0.7, 1e-12);

    let s = SelectionSchedule {
        alpha0: 0.5,
        ramp_epochs: 80,
    };
    b.close("alpha at ramp", s.at(80).0, 0.5, 1e-12);
    b.close("gamma at ramp", s.at(80).1, 1.0, 1e-12);
    b.close("alpha past ramp", s.at(500).0, 0.5, 1e-12);
    b.close("alpha mid ramp", s.at(40).0, 0.5f64.sqrt(), 1e-12);
    b.close("alpha mid ramp printed", s.at(40).0, 0.707107, 1e-6);
    Ok(())
}

fn smoothing_values(b: &mut Book) -> Result<()> {
    let k = gaussian_kernel(3, 1.0)?;
    let e = (-0.5f64).exp();
    b.close("gaussian centre", k.at(1, 1), 1.0 / ((1.0 + 2.0 * e) * (1.0 + 2.0 * e)), 1e-12);
    let total: f64 = k.to_2d().iter().sum();
    b.close("gaussian mass", total, 1.0, 1e-12);

    let (h, w) = (5, 6);
    let z = LabelMap::single(h, w, (0..h * w).map(|i| u8::from(i % w >= 3)).collect())?;
    let m = spatial_mask(&z, 2, &flat_kernel(3)?)?.into_tensor();
    let px = h * w;
    let i = 2 * w + 2;
    b.close("flat kernel majority side", m.data()[i], 2.0 / 3.0, 1e-9);
    b.close("flat kernel minority class", m.data()[px + i], 1.0 / 3.0, 1e-9);

    let seasons = SeasonalLabels::new(vec![
        LabelMap::filled(1, 4, 4, 0),
        LabelMap::filled(1, 4, 4, 0),
        LabelMap::filled(1, 4, 4, 1),
        LabelMap::filled(1, 4, 4, 0),
    ])?;
    let t = temporal_mask(&seasons, 2, &gaussian_kernel(3, 1.0)?)?.into_tensor();
    b.close("temporal mask class 0", t.data()[5], 0.75, 1e-9);
    b.close("temporal mask class 1", t.data()[16 + 5], 0.25, 1e-9);

    let zero = LabelMap::filled(1, 6, 6, 0);
    let seasons = SeasonalLabels::new(vec![zero.clone(); 4])?;
    let params = SmoothingParams {
        beta: 0.05,
        mu: 0.15,
        ..SmoothingParams::default()
    };
    let zs = smooth(&zero, &seasons, 2, &params)?.into_tensor();
    b.close("smoothed pixel class 0", zs.data()[14], 0.8 + 0.05 * 0.5 + 0.15, 1e-9);
    b.close("smoothed pixel class 1", zs.data()[36 + 14], 0.05 * 0.5, 1e-9);
    Ok(())
}

fn misc_values(b: &mut Book) -> Result<()> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, k, None, 1, 0)?;
    b.close("conv of ones", g.value(y).item(), 9.0, 0.0);

    let r = ConfusionMatrix::from_counts(&[vec![2, 0], vec![1, 1]])?.report();
    b.close("overall accuracy", r.oa, 3.0 / 4.0, 1e-9);
    b.close("average accuracy", r.aa, (1.0 + 0.5) / 2.0, 1e-9);
    b.close("mean IoU", r.miou, (2.0 / 3.0 + 1.0 / 2.0) / 2.0, 1e-9);
    b.close("mean F1", r.mf1, (0.8 + 2.0 / 3.0) / 2.0, 1e-9);
    b.close("mean IoU printed", r.miou, 0.583333, 1e-6);
    b.close("mean F1 printed", r.mf1, 0.733333, 1e-6);

    let a = LabelMap::single(1, 4, vec![1, 2, 2, 1])?;
    let c = LabelMap::single(1, 4, vec![0, 1, 0, 2])?;
    let rel = vec![vec![], vec![0], vec![0, 1]];
    b.close("agreement accuracy", agreement_accuracy(&a, &c, &rel)?, 0.75, 1e-12);

    let stats = NormStats {
        mean: vec![3.0],
        std: vec![2.0],
    };
    let n = normalize(&Tensor::new(vec![1, 1, 1], vec![5.0])?, &stats)?;
    b.close("normalize mean plus sigma", n.item(), 0.75, 1e-12);

    let cfg = MiniUNetConfig {
        in_channels: vec![1],
        base_width: 2,
        depth: 1,
        num_classes: 2,
    };
    let mut model = ModelPair::build(cfg, FusionSpec::new(FusionMode::Single), 0)?;
    let before = model.params().get(ParamId(0)).clone();
    let mut adam = Adam::new(model.params());
    let grads = vec![(ParamId(0), Tensor::full(before.shape(), 1.0))];
    adam.update(model.params_mut(), &grads, 1e-3)?;
    let after = model.params().get(ParamId(0));
    let step = after.data()[0] - before.data()[0];
    b.close("adam first step", step, -1e-3 / (1.0 + 1e-8), 1e-12);
    Ok(())
}

pub fn run() -> Outcome {
    let mut b = Book {
        checked: 0,
        failures: Vec::new(),
    };
    loss_values(&mut b).map_err(|e| e.to_string())?;
    selection_values(&mut b).map_err(|e| e.to_string())?;
    smoothing_values(&mut b).map_err(|e| e.to_string())?;
    misc_values(&mut b).map_err(|e| e.to_string())?;
    Ok(if b.failures.is_empty() {
        Verdict::new(true, format!("{} values match", b.checked))
    } else {
        Verdict::new(false, b.failures.join("; "))
    })
}
