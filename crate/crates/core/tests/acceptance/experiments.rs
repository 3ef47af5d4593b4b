use std::collections::BTreeMap;

use nlss_core::data::{generate, normalize, Dataset, NoiseKind, NoiseSpec, SceneSpec};
use nlss_core::error::Result;
use nlss_core::eval::{evaluate, noise_detection_report, stack_images, NoiseDetection};
use nlss_core::labels::LabelMap;
use nlss_core::model::{write_checkpoint, ModelPair};
use nlss_core::select::select;
use nlss_core::smooth::{SmoothingParams, SEASONS};
use nlss_core::train::{transfer, RunLog, TrainConfig, TrainMode, Trainer, TransferConfig, TransferInit};

use crate::{Outcome, Verdict};

const SEEDS: [u64; 3] = [0, 1, 2];
const DOWNSTREAM_MAP: [u8; 4] = [0, 0, 1, 2];

/// Four smoothing settings as `(beta, mu)`; the last is the default combination.
const SMOOTHING_GRID: [(f64, f64); 4] = [(0.0, 0.0), (0.2, 0.0), (0.0, 0.2), (0.05, 0.15)];

#[derive(Clone, Copy, Debug, PartialEq)]
struct ArmKey {
    seed: u64,
    mode: TrainMode,
    beta: f64,
    mu: f64,
}

struct Arm {
    model: ModelPair,
    log: RunLog,
    checkpoint: Vec<u8>,
    /// Test mIoU per model modality.
    miou: Vec<f64>,
}

impl Arm {
    fn mean_miou(&self) -> f64 {
        self.miou.iter().sum::<f64>() / self.miou.len() as f64
    }
}

/// Datasets and trained runs shared across criteria.
pub struct Lab {
    benchmarks: BTreeMap<u64, Dataset>,
    arms: Vec<(ArmKey, Arm)>,
}

fn benchmark_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        seed,
        ..SceneSpec::default()
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn train_arm(ds: &Dataset, key: ArmKey) -> Result<Arm> {
    let cfg = TrainConfig {
        mode: key.mode,
        seed: key.seed,
        smoothing: SmoothingParams {
            beta: key.beta,
            mu: key.mu,
            ..SmoothingParams::default()
        },
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(ds.train_view(), &cfg)?;
    while !t.finished() {
        t.run_epoch(None)?;
    }
    let mut checkpoint = Vec::new();
    write_checkpoint(&mut checkpoint, &t.checkpoint())?;
    let (model, log) = t.into_parts();
    let ev = ds.eval_view();
    let miou = key
        .mode
        .data_modalities()
        .iter()
        .enumerate()
        .map(|(k, &d)| evaluate(&model, k, d, &ev).map(|r| r.miou))
        .collect::<Result<Vec<_>>>()?;
    Ok(Arm {
        model,
        log,
        checkpoint,
        miou,
    })
}

impl Lab {
    pub fn new() -> Self {
        Lab {
            benchmarks: BTreeMap::new(),
            arms: Vec::new(),
        }
    }

    fn benchmark(&mut self, seed: u64) -> Result<&Dataset> {
        if !self.benchmarks.contains_key(&seed) {
            self.benchmarks.insert(seed, generate(&benchmark_spec(seed))?);
        }
        Ok(&self.benchmarks[&seed])
    }

    fn arm(&mut self, seed: u64, mode: TrainMode, (beta, mu): (f64, f64)) -> Result<&Arm> {
        let key = ArmKey { seed, mode, beta, mu };
        if let Some(i) = self.arms.iter().position(|(k, _)| *k == key) {
            return Ok(&self.arms[i].1);
        }
        let arm = train_arm(self.benchmark(seed)?, key)?;
        self.arms.push((key, arm));
        Ok(&self.arms.last().expect("just pushed").1)
    }

    fn default_arm(&mut self, seed: u64, mode: TrainMode) -> Result<&Arm> {
        let s = SmoothingParams::default();
        self.arm(seed, mode, (s.beta, s.mu))
    }

    /// Seed-mean of the per-modality mean mIoU.
    fn mode_mean(&mut self, mode: TrainMode) -> Result<f64> {
        let mut sum = 0.0;
        for seed in SEEDS {
            sum += self.default_arm(seed, mode)?.mean_miou();
        }
        Ok(sum / SEEDS.len() as f64)
    }

    /// Seed-mean mIoU of model modality `k`.
    fn modality_mean(&mut self, mode: TrainMode, k: usize) -> Result<f64> {
        let mut sum = 0.0;
        for seed in SEEDS {
            sum += self.default_arm(seed, mode)?.miou[k];
        }
        Ok(sum / SEEDS.len() as f64)
    }

    fn fusion_inner(&mut self) -> Result<Verdict> {
        let mut means = BTreeMap::new();
        for mode in TrainMode::ALL {
            means.insert(mode.as_str(), self.mode_mean(mode)?);
        }
        let single = (means["single1"] + means["single2"]) / 2.0;
        let (best_name, best) = ["midF", "lateF"]
            .into_iter()
            .map(|m| (m, means[m]))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("two modes");
        let fusion_gain = best - single;
        let best_mode: TrainMode = best_name.parse()?;
        let per_modality = [
            self.modality_mean(best_mode, 0)? - means["single1"],
            self.modality_mean(best_mode, 1)? - means["single2"],
        ];
        let mid_gap = means["cromss_midF"] - means["midF"];
        let late_gap = means["cromss_lateF"] - means["lateF"];
        let ok = fusion_gain >= 0.02 && mid_gap >= -0.005 && late_gap >= -0.005;
        let table: Vec<String> = TrainMode::ALL.iter().map(|m| format!("{m} {}", pct(means[m.as_str()]))).collect();
        Ok(Verdict::new(
            ok,
            format!(
                "mIoU {}; {best_name} - single {:+.2} (modality 1 {:+.2}, modality 2 {:+.2}), cromss_midF - midF {:+.2}, cromss_lateF - lateF {:+.2}",
                table.join(", "),
                100.0 * fusion_gain,
                100.0 * per_modality[0],
                100.0 * per_modality[1],
                100.0 * mid_gap,
                100.0 * late_gap
            ),
        ))
    }

    pub fn fusion_ordering(&mut self) -> Outcome {
        self.fusion_inner().map_err(|e| e.to_string())
    }

    fn transfer_inner(&mut self) -> Result<Verdict> {
        let mut gains = Vec::new();
        let (mut pre_sum, mut rnd_sum) = (0.0, 0.0);
        for seed in SEEDS {
            let spec = SceneSpec {
                seed: seed + 1000,
                num_locations: 60,
                num_test: 20,
                noise: NoiseSpec {
                    kind: NoiseKind::Symmetric,
                    rate: 0.0,
                },
                season_drift: 0.0,
                ..SceneSpec::default()
            };
            let downstream = generate(&spec)?.remap_classes(&DOWNSTREAM_MAP)?;
            let source = &self.default_arm(seed, TrainMode::CromssMidF)?.model;
            let mut miou = [0.0; 2];
            for (k, frozen_init) in [TransferInit::Pretrained(source, 1), TransferInit::Random].into_iter().enumerate() {
                let cfg = TransferConfig {
                    modality: 1,
                    seed,
                    ..TransferConfig::default()
                };
                let (model, _) = transfer(downstream.train_view(), frozen_init, &cfg)?;
                miou[k] = evaluate(&model, 0, 1, &downstream.eval_view())?.miou;
            }
            pre_sum += miou[0];
            rnd_sum += miou[1];
            gains.push(format!("seed {seed}: {} vs {}", pct(miou[0]), pct(miou[1])));
        }
        let n = SEEDS.len() as f64;
        let gain = (pre_sum - rnd_sum) / n;
        Ok(Verdict::new(
            gain >= 0.05,
            format!(
                "frozen encoder, pretrained {} vs random {} mIoU ({:+.2}); {}",
                pct(pre_sum / n),
                pct(rnd_sum / n),
                100.0 * gain,
                gains.join(", ")
            ),
        ))
    }

    pub fn transfer_ordering(&mut self) -> Outcome {
        self.transfer_inner().map_err(|e| e.to_string())
    }

    fn detection_inner(&mut self) -> Result<Verdict> {
        let mut precisions = Vec::new();
        for seed in SEEDS {
            let spec = SceneSpec {
                seed: seed + 2000,
                noise: NoiseSpec {
                    kind: NoiseKind::Symmetric,
                    rate: 0.3,
                },
                season_drift: 0.0,
                ..SceneSpec::default()
            };
            let ds = generate(&spec)?;
            let cfg = TrainConfig {
                mode: TrainMode::CromssMidF,
                seed,
                epochs: TrainConfig::default().schedule.ramp_epochs + 6,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(ds.train_view(), &cfg)?;
            while !t.finished() {
                t.run_epoch(None)?;
            }
            let (alpha, gamma) = cfg.schedule.at(cfg.epochs);
            let model = t.model();
            let mut total: Option<NoiseDetection> = None;
            for chunk in ds.splits.train.chunks(cfg.batch_size) {
                let season = |l: usize| l % SEASONS;
                let mut probs = Vec::new();
                for d in 0..2 {
                    let x = chunk
                        .iter()
                        .map(|&l| normalize(&ds.locations[l].images[season(l)][d], &ds.norm[d]))
                        .collect::<Result<Vec<_>>>()?;
                    probs.push(model.predict(d, stack_images(&x)?)?);
                }
                let noisy = LabelMap::stack(&chunk.iter().map(|&l| ds.locations[l].labels[season(l)].clone()).collect::<Vec<_>>())?;
                let clean = LabelMap::stack(&chunk.iter().map(|&l| ds.truth().clean(l).clone()).collect::<Vec<_>>())?;
                let masks = select([&probs[0], &probs[1]], &noisy, alpha, gamma)?;
                for w in &masks.w_l {
                    let r = noise_detection_report(w, &clean, &noisy)?;
                    total = Some(total.map_or(r, |t| t.merge(&r)));
                }
            }
            let r = total.expect("nonempty training split");
            precisions.push((r.precision.unwrap_or(0.0), r.noisy as f64 / r.labeled as f64));
        }
        let mean = precisions.iter().map(|p| p.0).sum::<f64>() / precisions.len() as f64;
        let per_seed: Vec<String> = precisions
            .iter()
            .map(|(p, rate)| format!("{p:.3} (noise {rate:.3})"))
            .collect();
        Ok(Verdict::new(
            mean >= 0.45,
            format!("W_l-flagged precision {mean:.3}, chance 0.30; per seed {}", per_seed.join(", ")),
        ))
    }

    pub fn noise_detection(&mut self) -> Outcome {
        self.detection_inner().map_err(|e| e.to_string())
    }

    fn smoothing_inner(&mut self) -> Result<Verdict> {
        let mut means = Vec::new();
        for setting in SMOOTHING_GRID {
            let mut sum = 0.0;
            for seed in SEEDS {
                sum += self.arm(seed, TrainMode::CromssMidF, setting)?.mean_miou();
            }
            means.push(sum / SEEDS.len() as f64);
        }
        let best = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let combined = *means.last().expect("four settings");
        let table: Vec<String> = SMOOTHING_GRID
            .iter()
            .zip(&means)
            .map(|((b, m), v)| format!("beta {b} mu {m}: {}", pct(*v)))
            .collect();
        Ok(Verdict::new(
            best - combined <= 0.015,
            format!("{}; combined trails best by {:.2}", table.join(", "), 100.0 * (best - combined)),
        ))
    }

    pub fn smoothing_ablation(&mut self) -> Outcome {
        self.smoothing_inner().map_err(|e| e.to_string())
    }

    fn determinism_inner(&mut self) -> Result<Verdict> {
        let mode = TrainMode::CromssLateF;
        let (log, ckpt) = {
            let a = self.default_arm(0, mode)?;
            (a.log.clone(), a.checkpoint.clone())
        };
        let s = SmoothingParams::default();
        let again = train_arm(self.benchmark(0)?, ArmKey {
            seed: 0,
            mode,
            beta: s.beta,
            mu: s.mu,
        })?;
        let cols = |l: &RunLog| l.rows().iter().map(|r| r.loss_columns().map(f64::to_bits)).collect::<Vec<_>>();
        let same_log = cols(&log) == cols(&again.log);
        let same_ckpt = ckpt == again.checkpoint;
        Ok(Verdict::new(
            same_log && same_ckpt,
            format!(
                "{mode} seed 0 twice: {} epochs of loss columns {}, {}-byte checkpoints {}",
                log.rows().len(),
                if same_log { "identical" } else { "DIFFER" },
                ckpt.len(),
                if same_ckpt { "identical" } else { "DIFFER" }
            ),
        ))
    }

    pub fn determinism(&mut self) -> Outcome {
        self.determinism_inner().map_err(|e| e.to_string())
    }
}
