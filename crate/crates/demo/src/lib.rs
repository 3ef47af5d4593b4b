//! Browser bindings for three small explorers: label smoothing on a
//! synthetic scene, selection masks for simulated predictions of two
//! modalities, and the selection schedule.

use rand::Rng;
use rand_distr::StandardNormal;
use wasm_bindgen::prelude::*;

use nlss_core::data::{inject_noise, voronoi_map, NoiseKind, NoiseSpec};
use nlss_core::labels::LabelMap;
use nlss_core::rng::{stream, stream2};
use nlss_core::select::{select, SelectionSchedule};
use nlss_core::smooth::{smooth, SeasonalLabels, SmoothingParams, SEASONS};
use nlss_core::tensor::Tensor;

const TAG_SCENE: u64 = 0xde0;
const TAG_PRED: u64 = 0xde1;

fn scene(seed: u64, size: usize, classes: usize) -> Result<LabelMap, String> {
    if !(8..=256).contains(&size) {
        return Err(format!("size {size} outside 8..=256"));
    }
    if !(2..=8).contains(&classes) {
        return Err(format!("classes {classes} outside 2..=8"));
    }
    Ok(voronoi_map(&mut stream(seed, TAG_SCENE), size, size, classes))
}

fn noise_spec(kind: &str, rate: f64) -> Result<NoiseSpec, String> {
    let kind: NoiseKind = kind.parse().map_err(|e| format!("{e}"))?;
    Ok(NoiseSpec { kind, rate })
}

/// Clean scene, noisy labels for each season and the smoothed target of
/// the first season.
#[wasm_bindgen]
pub struct SmoothingView {
    size: usize,
    classes: usize,
    clean: Vec<u8>,
    seasons: Vec<u8>,
    target: Vec<f64>,
}

#[wasm_bindgen]
impl SmoothingView {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    #[wasm_bindgen(getter)]
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn clean(&self) -> Vec<u8> {
        self.clean.clone()
    }

    /// Noisy labels of season `t`.
    pub fn season(&self, t: usize) -> Vec<u8> {
        let px = self.size * self.size;
        self.seasons.get(t * px..(t + 1) * px).map(<[u8]>::to_vec).unwrap_or_default()
    }

    /// Smoothed target laid out `[class, y, x]`.
    pub fn target(&self) -> Vec<f64> {
        self.target.clone()
    }

    /// Target probability of the observed label at each pixel.
    pub fn kept(&self) -> Vec<f64> {
        let px = self.size * self.size;
        (0..px)
            .map(|i| self.target[self.seasons[i] as usize * px + i])
            .collect()
    }
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn smoothing_view(
    seed: u64,
    size: usize,
    classes: usize,
    noise_kind: &str,
    noise_rate: f64,
    beta: f64,
    mu: f64,
    kernel_size: usize,
    sigma: f64,
) -> Result<SmoothingView, String> {
    let clean = scene(seed, size, classes)?;
    let spec = noise_spec(noise_kind, noise_rate)?;
    let maps = (0..SEASONS)
        .map(|t| inject_noise(&clean, classes, spec, stream2(seed, TAG_SCENE, t as u64).random()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let params = SmoothingParams {
        beta,
        mu,
        kernel_size,
        sigma,
    };
    let seasonal = SeasonalLabels::new(maps.clone()).map_err(|e| e.to_string())?;
    let target = smooth(&maps[0], &seasonal, classes, &params).map_err(|e| e.to_string())?;
    Ok(SmoothingView {
        size,
        classes,
        clean: clean.data().to_vec(),
        seasons: maps.iter().flat_map(|m| m.data().iter().copied()).collect(),
        target: target.into_tensor().into_data(),
    })
}

/// Selection masks for two simulated modalities.
#[wasm_bindgen]
pub struct MaskView {
    size: usize,
    clean: Vec<u8>,
    noisy: Vec<u8>,
    /// Per modality: `F_l, F_e, Fp_l, Fp_e, W_l, W_e`.
    masks: [Vec<Vec<f64>>; 2],
    zero_threshold: usize,
}

const MASK_NAMES: [&str; 6] = ["F_l", "F_e", "Fp_l", "Fp_e", "W_l", "W_e"];

#[wasm_bindgen]
impl MaskView {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn clean(&self) -> Vec<u8> {
        self.clean.clone()
    }

    pub fn noisy(&self) -> Vec<u8> {
        self.noisy.clone()
    }

    /// One of `F_l`, `F_e`, `Fp_l`, `Fp_e`, `W_l`, `W_e` for modality 1 or 2.
    pub fn mask(&self, name: &str, modality: usize) -> Result<Vec<f64>, String> {
        let k = MASK_NAMES
            .iter()
            .position(|&n| n == name)
            .ok_or_else(|| format!("unknown mask {name:?}"))?;
        match modality {
            1 | 2 => Ok(self.masks[modality - 1][k].clone()),
            _ => Err(format!("modality {modality} is not 1 or 2")),
        }
    }

    /// Classes whose label-confidence threshold came out as zero.
    #[wasm_bindgen(getter)]
    pub fn zero_threshold(&self) -> usize {
        self.zero_threshold
    }

    /// Share of pixels with `W_l < 1` for `modality` whose label is wrong.
    pub fn precision(&self, modality: usize) -> Result<f64, String> {
        let w = self.mask("W_l", modality)?;
        let (mut flagged, mut hit) = (0usize, 0usize);
        for (i, &v) in w.iter().enumerate() {
            if v < 1.0 {
                flagged += 1;
                hit += usize::from(self.noisy[i] != self.clean[i]);
            }
        }
        Ok(if flagged == 0 { 0.0 } else { hit as f64 / flagged as f64 })
    }
}

/// Class probabilities that put `skill` logits on the clean class plus
/// Gaussian logit noise of unit scale, laid out `[1, classes, y, x]`.
fn simulate(clean: &LabelMap, classes: usize, skill: f64, rng: &mut impl Rng) -> Result<Tensor, String> {
    let px = clean.data().len();
    let mut out = vec![0.0; classes * px];
    for (i, &c) in clean.data().iter().enumerate() {
        let logits: Vec<f64> = (0..classes)
            .map(|k| if k == c as usize { skill } else { 0.0 } + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for (k, l) in logits.iter().enumerate() {
            out[k * px + i] = (l - m).exp() / z;
        }
    }
    Tensor::new(vec![1, classes, clean.height(), clean.width()], out).map_err(|e| e.to_string())
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn mask_view(
    seed: u64,
    size: usize,
    classes: usize,
    noise_kind: &str,
    noise_rate: f64,
    skill1: f64,
    skill2: f64,
    alpha: f64,
    gamma: f64,
) -> Result<MaskView, String> {
    if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&gamma) {
        return Err("alpha and gamma must lie in [0, 1]".into());
    }
    let clean = scene(seed, size, classes)?;
    let noisy = inject_noise(&clean, classes, noise_spec(noise_kind, noise_rate)?, seed).map_err(|e| e.to_string())?;
    let mut rng = stream(seed, TAG_PRED);
    let p1 = simulate(&clean, classes, skill1, &mut rng)?;
    let p2 = simulate(&clean, classes, skill2, &mut rng)?;
    let m = select([&p1, &p2], &noisy, alpha, gamma).map_err(|e| e.to_string())?;
    let masks = [0, 1].map(|d| {
        vec![
            m.f_l[d].values().to_vec(),
            m.f_e[d].values().to_vec(),
            m.fp_l[d].values().to_vec(),
            m.fp_e[d].values().to_vec(),
            m.w_l[d].values().to_vec(),
            m.w_e[d].values().to_vec(),
        ]
    });
    Ok(MaskView {
        size,
        clean: clean.data().to_vec(),
        noisy: noisy.data().to_vec(),
        masks,
        zero_threshold: m.zero_threshold_classes.len(),
    })
}

/// `[alpha_0, gamma_0, alpha_1, gamma_1, ...]` for epochs `0..=epochs`.
#[wasm_bindgen]
pub fn schedule_curves(alpha0: f64, ramp_epochs: usize, epochs: usize) -> Result<Vec<f64>, String> {
    let s = SelectionSchedule { alpha0, ramp_epochs };
    s.validate().map_err(|e| e.to_string())?;
    Ok((0..=epochs).flat_map(|e| <[f64; 2]>::from(s.at(e))).collect())
}
