use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nlss_core::error::Result;
use nlss_core::labels::{LabelMap, UNLABELED};
use nlss_core::select::{enhance, select, ConfKind, ConfMask, SelectionSchedule};
use nlss_core::smooth::{smooth, SeasonalLabels, SmoothingParams, SEASONS};
use nlss_core::tensor::Tensor;

use crate::{Outcome, Verdict};

const CASES: usize = 10_000;

fn probs(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Tensor {
    let px = h * w;
    let mut d = vec![0.0; b * c * px];
    for bi in 0..b {
        for i in 0..px {
            let scale = rng.random_range(0.1..6.0);
            let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for k in 0..c {
                d[(bi * c + k) * px + i] = (logits[k] - m).exp() / z;
            }
        }
    }
    Tensor::new(vec![b, c, h, w], d).unwrap()
}

fn labels(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize, holes: f64) -> LabelMap {
    let data = (0..b * h * w)
        .map(|_| if rng.random_bool(holes) { UNLABELED } else { rng.random_range(0..c as u8) })
        .collect();
    LabelMap::new(b, h, w, data).unwrap()
}

/// Checks one random selection step; returns a description of the first violation.
fn selection_case(rng: &mut ChaCha8Rng) -> Result<Option<String>> {
    let b = rng.random_range(1..=2);
    let c = rng.random_range(2..=5);
    let h = rng.random_range(2..=6);
    let w = rng.random_range(2..=6);
    let alpha = rng.random_range(0.05..=1.0);
    let gamma = rng.random_range(0.0..=1.0);
    let p = [probs(rng, b, c, h, w), probs(rng, b, c, h, w)];
    let y = labels(rng, b, c, h, w, 0.1);
    let s = select([&p[0], &p[1]], &y, alpha, gamma)?;

    for (name, t) in s.named_tensors() {
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Ok(Some(format!("{name} value {v} outside [0, 1]")));
        }
    }
    for d in 0..2 {
        for (f, fp) in [(&s.f_l[d], &s.fp_l[d]), (&s.f_e[d], &s.fp_e[d])] {
            for (&a, &e) in f.values().iter().zip(fp.values()) {
                if !(e >= a / 2.0 - 1e-12 && e <= a + 1e-12) {
                    return Ok(Some(format!("enhanced {e} not within [{}, {a}]", a / 2.0)));
                }
            }
        }

        let wl = s.w_l[d].values();
        let conf = s.fp_l[d].values();
        for class in 0..c as u8 {
            let members: Vec<usize> = (0..y.data().len()).filter(|&j| y.data()[j] == class).collect();
            if members.is_empty() || s.zero_threshold_classes.contains(&class) {
                continue;
            }
            let k = ((alpha * members.len() as f64).floor() as usize).max(1);
            let full = members.iter().filter(|&&j| wl[j] == 1.0).count();
            let mut vals: Vec<f64> = members.iter().map(|&j| conf[j]).collect();
            vals.sort_by(|a, b| b.total_cmp(a));
            let distinct = vals.windows(2).all(|p| p[0] > p[1]);
            if distinct && full != k {
                return Ok(Some(format!("class {class}: {full} pixels at weight 1, expected {k}")));
            }
            for &i in &members {
                for &j in &members {
                    if conf[i] < conf[j] && wl[i] > wl[j] {
                        return Ok(Some(format!("label weight not monotone in class {class}")));
                    }
                }
            }
        }
        for (j, &lab) in y.data().iter().enumerate() {
            if lab == UNLABELED && wl[j] != 0.0 {
                return Ok(Some("unlabeled pixel with nonzero label weight".into()));
            }
        }
        let we = s.w_e[d].values();
        let fe = s.fp_e[d].values();
        for i in 0..fe.len() {
            for j in 0..fe.len() {
                if fe[i] < fe[j] && we[i] > we[j] + 1e-15 {
                    return Ok(Some("entity weight not monotone".into()));
                }
            }
        }
    }
    Ok(None)
}

fn footnote_case(rng: &mut ChaCha8Rng) -> Result<Option<String>> {
    let eps = rng.random_range(0.0..0.5);
    let hi = ConfMask::new(ConfKind::Label, 1, 1, 1, vec![0.5 + eps])?;
    let lo = ConfMask::new(ConfKind::Label, 1, 1, 1, vec![0.5 - eps])?;
    let up = enhance(&hi, &lo)?.values()[0];
    let down = enhance(&lo, &hi)?.values()[0];
    for (got, centre) in [(up, 0.375 + eps / 2.0), (down, 0.375 - eps / 2.0)] {
        if (got - centre).abs() > eps * eps + 1e-12 {
            return Ok(Some(format!("eps {eps}: enhanced {got} more than eps^2 from {centre}")));
        }
    }
    Ok(None)
}

fn smoothing_case(rng: &mut ChaCha8Rng) -> Result<Option<String>> {
    let c = rng.random_range(2..=5);
    let h = rng.random_range(3..=9);
    let w = rng.random_range(3..=9);
    let seasons: Vec<LabelMap> = (0..SEASONS).map(|_| labels(rng, 1, c, h, w, 0.1)).collect();
    let t = rng.random_range(0..SEASONS);
    let beta = rng.random_range(0.0..0.5);
    let params = SmoothingParams {
        beta,
        mu: rng.random_range(0.0..(1.0 - beta)),
        kernel_size: [1, 3, 5][rng.random_range(0..3)],
        sigma: rng.random_range(0.3..2.0),
    };
    let z = seasons[t].clone();
    let zs = smooth(&z, &SeasonalLabels::new(seasons)?, c, &params)?;
    if let Some(v) = zs.tensor().data().iter().find(|v| !(0.0..=1.0 + 1e-12).contains(*v)) {
        return Ok(Some(format!("smoothed value {v} outside [0, 1]")));
    }
    for (j, s) in zs.pixel_sums().into_iter().enumerate() {
        let want = if z.data()[j] == UNLABELED { 0.0 } else { 1.0 };
        if (s - want).abs() > 1e-6 {
            return Ok(Some(format!("smoothed pixel sums to {s}, expected {want}")));
        }
    }
    Ok(None)
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1ec7);
    let checks: [(&str, fn(&mut ChaCha8Rng) -> Result<Option<String>>); 3] =
        [("selection", selection_case), ("enhancement bound", footnote_case), ("smoothing", smoothing_case)];
    for (name, check) in checks {
        for i in 0..CASES {
            if let Some(msg) = check(&mut rng).map_err(|e| format!("{name} case {i}: {e}"))? {
                return Ok(Verdict::new(false, format!("{name} case {i}: {msg}")));
            }
        }
    }
    Ok(Verdict::new(true, format!("{CASES} random cases each for selection, enhancement bound and smoothing")))
}

pub fn schedule() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa1fa);
    let mut fails = Vec::new();
    for _ in 0..200 {
        let s = SelectionSchedule {
            alpha0: rng.random_range(0.01..=1.0),
            ramp_epochs: rng.random_range(1..=200),
        };
        let (a0, g0) = s.at(0);
        let (ar, gr) = s.at(s.ramp_epochs);
        if a0 != 1.0 || g0 != 0.0 {
            fails.push(format!("{s:?}: start ({a0}, {g0})"));
        }
        if (ar - s.alpha0).abs() > 1e-12 || gr != 1.0 {
            fails.push(format!("{s:?}: end ({ar}, {gr})"));
        }
        for e in 0..s.ramp_epochs + 20 {
            let (a, g) = s.at(e);
            let (a1, g1) = s.at(e + 1);
            if a1 > a || g1 < g {
                fails.push(format!("{s:?}: not monotone at epoch {e}"));
                break;
            }
        }
        if s.at(s.ramp_epochs + 50) != (ar, gr) {
            fails.push(format!("{s:?}: moves after the ramp"));
        }
    }
    let ramp80 = SelectionSchedule {
        alpha0: 0.5,
        ramp_epochs: 80,
    };
    if ramp80.at(0) != (1.0, 0.0) || (ramp80.at(80).0 - 0.5).abs() > 1e-12 || ramp80.at(80).1 != 1.0 {
        fails.push("alpha0 0.5 over 80 epochs misses its endpoints".into());
    }
    Ok(if fails.is_empty() {
        Verdict::new(true, "200 random schedules plus (0.5, 80): (1, 0) at start, (alpha0, 1) from the ramp end, monotone")
    } else {
        Verdict::new(false, fails.join("; "))
    })
}
