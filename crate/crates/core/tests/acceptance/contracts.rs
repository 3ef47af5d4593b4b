use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nlss_core::autodiff::{Graph, ParamId, Var};
use nlss_core::error::Result;
use nlss_core::labels::{LabelMap, SoftLabel};
use nlss_core::loss::{kl_consistency, seg_loss, total_loss, LossWeights, MaskRole, ModalityMasks, WeightMask};
use nlss_core::model::{BnUpdates, ForwardOpts, FusionMode, FusionSpec, MiniUNetConfig, ModelPair};
use nlss_core::tensor::Tensor;
use nlss_core::train::Adam;

use crate::{Outcome, Verdict};

const B: usize = 2;
const S: usize = 8;

struct Case {
    x: [Tensor; 2],
    z: SoftLabel,
    wl: [WeightMask; 2],
    we: [WeightMask; 2],
}

fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = B * S * S;
    let mut img = || Tensor::new(vec![B, 2, S, S], (0..2 * px).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let x = [img(), img()];
    let y = LabelMap::new(B, S, S, (0..px).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
    let mut mask = |role| WeightMask::new(role, B, S, S, (0..px).map(|_| rng.random_range(0.05..1.0)).collect()).unwrap();
    let wl = [mask(MaskRole::LabelBased), mask(MaskRole::LabelBased)];
    let we = [mask(MaskRole::EntityBased), mask(MaskRole::EntityBased)];
    Case {
        x,
        z: y.one_hot(2).unwrap(),
        wl,
        we,
    }
}

fn micro(fusion: FusionMode, seed: u64) -> ModelPair {
    let cfg = MiniUNetConfig {
        in_channels: vec![2, 2],
        base_width: 2,
        depth: 1,
        num_classes: 2,
    };
    ModelPair::build(cfg, FusionSpec::new(fusion), seed).unwrap()
}

fn forward(m: &ModelPair, g: &mut Graph, c: &Case) -> Result<[Var; 2]> {
    let mut run = |d: usize| -> Result<Var> {
        let x = g.constant(c.x[d].clone());
        Ok(m.forward(g, d, x, ForwardOpts::train(), &mut BnUpdates::default())?.probs)
    };
    Ok([run(0)?, run(1)?])
}

#[derive(Clone, Copy, Debug)]
enum Objective {
    Seg,
    Consistency,
    Total,
}

/// Loss with the consistency targets held at `p`.
fn objective(m: &ModelPair, c: &Case, which: Objective, p: &[Tensor; 2]) -> Result<f64> {
    let mut g = Graph::new();
    let q = forward(m, &mut g, c)?;
    let seg = |g: &mut Graph| -> Result<Var> {
        let a = seg_loss(g, q[0], &c.z, &c.wl[0])?.total;
        let b = seg_loss(g, q[1], &c.z, &c.wl[1])?.total;
        g.add(a, b)
    };
    let kl = |g: &mut Graph| -> Result<Var> {
        let p1 = g.constant(p[0].clone());
        let p2 = g.constant(p[1].clone());
        let a = kl_consistency(g, p1, q[1], &c.we[0])?.value;
        let b = kl_consistency(g, p2, q[0], &c.we[1])?.value;
        g.add(a, b)
    };
    let l = match which {
        Objective::Seg => seg(&mut g)?,
        Objective::Consistency => kl(&mut g)?,
        Objective::Total => {
            let a = seg(&mut g)?;
            let b = kl(&mut g)?;
            g.add(a, b)?
        }
    };
    Ok(g.value(l).item())
}

fn analytic(m: &ModelPair, c: &Case, which: Objective) -> Result<(Vec<(ParamId, Tensor)>, [Tensor; 2])> {
    let mut g = Graph::new();
    let q = forward(m, &mut g, c)?;
    let p = [g.value(q[0]).clone(), g.value(q[1]).clone()];
    let masks = [
        ModalityMasks {
            label: &c.wl[0],
            entity: &c.we[0],
        },
        ModalityMasks {
            label: &c.wl[1],
            entity: &c.we[1],
        },
    ];
    let t = total_loss(&mut g, q, &c.z, masks, LossWeights::default())?;
    let l = match which {
        Objective::Seg => g.add(t.seg[0].total, t.seg[1].total)?,
        Objective::Consistency => g.add(t.kl[0].value, t.kl[1].value)?,
        Objective::Total => t.total,
    };
    g.backward(l)?;
    Ok((g.param_grads(), p))
}

/// Worst relative error between analytic and central-difference gradients
/// over every entry of every parameter.
fn max_rel_err(fusion: FusionMode, seed: u64, which: Objective) -> Result<(f64, usize)> {
    let model = micro(fusion, seed);
    let c = case(seed.wrapping_mul(31).wrapping_add(7));
    let (grads, p) = analytic(&model, &c, which)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut n = 0;
    let mut m = model.clone();
    for (id, grad) in &grads {
        for k in 0..grad.numel() {
            let orig = m.params().get(*id).data()[k];
            m.params_mut().get_mut(*id).data_mut()[k] = orig + h;
            let plus = objective(&m, &c, which, &p)?;
            m.params_mut().get_mut(*id).data_mut()[k] = orig - h;
            let minus = objective(&m, &c, which, &p)?;
            m.params_mut().get_mut(*id).data_mut()[k] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = grad.data()[k];
            let scale = fd.abs().max(an.abs());
            let err = if scale > 1e-6 { (fd - an).abs() / scale } else { (fd - an).abs() };
            worst = worst.max(err);
            n += 1;
        }
    }
    Ok((worst, n))
}

pub fn gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut bad = Vec::new();
    for seed in 0..10 {
        for fusion in [FusionMode::Late, FusionMode::Middle] {
            for which in [Objective::Seg, Objective::Consistency, Objective::Total] {
                let (err, n) = max_rel_err(fusion, seed, which).map_err(|e| e.to_string())?;
                entries += n;
                worst = worst.max(err);
                if !(err < 1e-4) {
                    bad.push(format!("{which:?}/{fusion:?}/seed {seed}: {err:.2e}"));
                }
            }
        }
    }
    Ok(Verdict::new(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{entries} parameter entries, max relative error {worst:.2e}")
        } else {
            bad.join("; ")
        },
    ))
}

fn fusion_inner() -> Result<Verdict> {
    let mut notes = Vec::new();
    let mut ok = true;

    // lateF: the consistency term whose target is P^d sends nothing into encoder d
    let model = micro(FusionMode::Late, 3);
    let c = case(11);
    for d in 0..2 {
        let mut g = Graph::new();
        let q = forward(&model, &mut g, &c)?;
        let masks = [
            ModalityMasks {
                label: &c.wl[0],
                entity: &c.we[0],
            },
            ModalityMasks {
                label: &c.wl[1],
                entity: &c.we[1],
            },
        ];
        let t = total_loss(&mut g, q, &c.z, masks, LossWeights::default())?;
        g.backward(t.kl[d].value)?;
        let grads = g.param_grads();
        let grad_of = |id: ParamId| grads.iter().find(|(i, _)| *i == id).map(|(_, t)| t.clone());
        let own_zero = model
            .encoder_param_ids(d)
            .into_iter()
            .all(|id| grad_of(id).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
        let other_moves = model
            .encoder_param_ids(1 - d)
            .into_iter()
            .any(|id| grad_of(id).is_some_and(|t| t.data().iter().any(|&v| v != 0.0)));
        ok &= own_zero && other_moves;
        notes.push(format!(
            "late kl{}: own encoder grad {}, partner encoder grad {}",
            d + 1,
            if own_zero { "exactly 0" } else { "NONZERO" },
            if other_moves { "nonzero" } else { "ZERO" }
        ));
    }

    // midF and lateF after 10 Adam steps on an asymmetric objective
    for fusion in [FusionMode::Middle, FusionMode::Late] {
        let mut model = micro(fusion, 5);
        let init = model.clone();
        let mut adam = Adam::new(model.params());
        for step in 0..10 {
            let c = case(100 + step);
            let mut g = Graph::new();
            let q = forward(&model, &mut g, &c)?;
            let wl2 = WeightMask::new(MaskRole::LabelBased, B, S, S, vec![0.2; B * S * S])?;
            let masks = [
                ModalityMasks {
                    label: &c.wl[0],
                    entity: &c.we[0],
                },
                ModalityMasks {
                    label: &wl2,
                    entity: &c.we[1],
                },
            ];
            let t = total_loss(&mut g, q, &c.z, masks, LossWeights::default())?;
            g.backward(t.total)?;
            adam.update(model.params_mut(), &g.param_grads(), 1e-2)?;
        }
        let (a, b) = (model.decoder_param_ids(0), model.decoder_param_ids(1));
        let vals = |ids: &[ParamId]| ids.iter().map(|&i| model.params().get(i).clone()).collect::<Vec<_>>();
        let moved = a.iter().any(|&i| model.params().get(i) != init.params().get(i));
        match fusion {
            FusionMode::Middle => {
                let shared = a == b && vals(&a) == vals(&b);
                ok &= shared && moved;
                notes.push(format!(
                    "mid decoder after 10 steps: {}, {}",
                    if shared { "bitwise shared" } else { "NOT SHARED" },
                    if moved { "updated" } else { "NOT UPDATED" }
                ));
            }
            _ => {
                let init_same = init.decoder_param_ids(0).iter().zip(init.decoder_param_ids(1).iter()).all(
                    |(&i, &j)| init.params().get(i) == init.params().get(j),
                );
                let apart = a != b && vals(&a) != vals(&b);
                ok &= apart;
                notes.push(format!(
                    "late decoders: {} at init, {} after 10 steps",
                    if init_same { "identical" } else { "DIFFERENT" },
                    if apart { "independent" } else { "STILL EQUAL" }
                ));
            }
        }
    }
    Ok(Verdict::new(ok, notes.join("; ")))
}

pub fn fusion() -> Outcome {
    fusion_inner().map_err(|e| e.to_string())
}
