//! Synthetic two-modality scenes with seasonal noisy labels.
//!
//! Clean label maps are warped Voronoi partitions. Each modality renders
//! every class as a Gaussian texture around a class mean; modality 1 places
//! the means close together, modality 2 far apart. Seasons shift image
//! statistics and drift a few boundary labels. Ground truth lives in
//! [`GroundTruth`], which training code never receives.

mod augment;
mod io;
mod noise;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use augment::{augment, AugSample, Geom};
pub use io::{load_dataset, save_dataset, DATASET_MAGIC};
pub use noise::{boundary_distance, inject_noise, NoiseKind, NoiseSpec};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::rng::{stream, stream2};
use crate::smooth::{blur_plane, gaussian_kernel, SEASONS};
use crate::tensor::Tensor;

const TAG_LOCATION: u64 = 0x10c;
const TAG_SEASON: u64 = 0x5ea;
const TAG_SPLIT: u64 = 0x5b1;
const TAG_NOISE: u64 = 0x401;
const TAG_DRIFT: u64 = 0xd71;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub channels: usize,
    /// Distance between neighbouring class means in units of texture noise.
    pub separability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Locations in the train and validation splits.
    pub num_locations: usize,
    pub num_test: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub modalities: [ModalitySpec; 2],
    pub noise: NoiseSpec,
    /// Fraction of boundary pixels relabeled independently per season.
    pub season_drift: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_locations: 200,
            num_test: 40,
            height: 64,
            width: 64,
            num_classes: 4,
            modalities: [
                ModalitySpec {
                    channels: 2,
                    separability: 1.4,
                },
                ModalitySpec {
                    channels: 2,
                    separability: 2.5,
                },
            ],
            noise: NoiseSpec {
                kind: NoiseKind::Mixed,
                rate: 0.3,
            },
            season_drift: 0.02,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 254 {
            return Err(Error::config(format!("num_classes {} outside 2..=254", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.noise.rate) {
            return Err(Error::config(format!("noise rate {} outside [0, 1)", self.noise.rate)));
        }
        if !(0.0..1.0).contains(&self.season_drift) {
            return Err(Error::config(format!("season drift {} outside [0, 1)", self.season_drift)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::config("tiles must be at least 4x4"));
        }
        if self.num_locations < 2 {
            return Err(Error::config("need at least two locations"));
        }
        for m in &self.modalities {
            if m.channels == 0 {
                return Err(Error::config("every modality needs a channel"));
            }
            if !(m.separability >= 0.0) {
                return Err(Error::config("separability must be nonnegative"));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> [usize; 2] {
        [self.modalities[0].channels, self.modalities[1].channels]
    }

    /// Class mean of `class` in `channel`: classes sit on a grid whose
    /// neighbouring points are `separability` apart.
    pub fn class_mean(&self, modality: usize, class: usize, channel: usize) -> f64 {
        let m = self.modalities[modality];
        let base = ((self.num_classes as f64).powf(1.0 / m.channels as f64).ceil() as usize).max(2);
        let digit = (0..channel).fold(class, |k, _| k / base) % base;
        m.separability * digit as f64
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics over every pixel of the given `[ch, H, W]` images.
    pub fn compute<'a>(images: impl Iterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for img in images {
            let ch = img.shape()[0];
            let px = img.numel() / ch;
            if sum.is_empty() {
                sum = vec![0.0; ch];
                sq = vec![0.0; ch];
            } else if sum.len() != ch {
                return Err(Error::dim("norm_stats", "images differ in channel count"));
            }
            for c in 0..ch {
                for &v in &img.data()[c * px..(c + 1) * px] {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += px;
        }
        if n == 0 {
            return Err(Error::data("no pixels to compute statistics from"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt())
            .collect();
        Ok(NormStats { mean, std })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::config(format!("channel {c} has zero spread")));
        }
        Ok(())
    }
}

/// Clamps each channel to `mean +- 2 std` and maps that interval onto `[0, 1]`.
pub fn normalize(x: &Tensor, stats: &NormStats) -> Result<Tensor> {
    stats.validate()?;
    let ch = x.shape().first().copied().unwrap_or(0);
    if ch != stats.mean.len() || x.rank() < 1 {
        return Err(Error::dim("normalize", format!("{} channels vs {} statistics", ch, stats.mean.len())));
    }
    let px = x.numel() / ch;
    let mut out = x.clone();
    for c in 0..ch {
        let lo = stats.mean[c] - 2.0 * stats.std[c];
        let span = 4.0 * stats.std[c];
        for v in &mut out.data_mut()[c * px..(c + 1) * px] {
            *v = ((*v - lo) / span).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// One location: per-season images of both modalities and noisy labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Location {
    pub id: usize,
    /// `images[season][modality]`, each `[channels, H, W]`.
    pub images: Vec<[Tensor; 2]>,
    /// Noisy label map per season.
    pub labels: Vec<LabelMap>,
}

/// Clean label maps, indexed like the dataset's locations.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    clean: Vec<LabelMap>,
}

impl GroundTruth {
    pub fn new(clean: Vec<LabelMap>) -> Self {
        GroundTruth { clean }
    }

    pub fn clean(&self, location: usize) -> &LabelMap {
        &self.clean[location]
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub locations: Vec<Location>,
    pub splits: Splits,
    /// Per-modality statistics from the training split.
    pub norm: [NormStats; 2],
    truth: GroundTruth,
}

/// What training code may see: images and noisy labels of the train and
/// validation splits.
#[derive(Clone, Copy, Debug)]
pub struct TrainView<'a> {
    pub spec: &'a SceneSpec,
    pub locations: &'a [Location],
    pub train: &'a [usize],
    pub val: &'a [usize],
    pub norm: &'a [NormStats; 2],
}

/// Test locations paired with their clean labels.
#[derive(Clone, Copy, Debug)]
pub struct EvalView<'a> {
    pub spec: &'a SceneSpec,
    pub locations: &'a [Location],
    pub test: &'a [usize],
    pub norm: &'a [NormStats; 2],
    pub truth: &'a GroundTruth,
}

impl Dataset {
    pub fn from_parts(
        spec: SceneSpec,
        locations: Vec<Location>,
        splits: Splits,
        norm: [NormStats; 2],
        truth: GroundTruth,
    ) -> Result<Self> {
        if truth.len() != locations.len() {
            return Err(Error::data("ground truth and locations differ in count"));
        }
        let n = locations.len();
        if splits.train.iter().chain(&splits.val).chain(&splits.test).any(|&i| i >= n) {
            return Err(Error::data("split refers to a missing location"));
        }
        Ok(Dataset {
            spec,
            locations,
            splits,
            norm,
            truth,
        })
    }

    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            spec: &self.spec,
            locations: &self.locations,
            train: &self.splits.train,
            val: &self.splits.val,
            norm: &self.norm,
        }
    }

    pub fn eval_view(&self) -> EvalView<'_> {
        EvalView {
            spec: &self.spec,
            locations: &self.locations,
            test: &self.splits.test,
            norm: &self.norm,
            truth: &self.truth,
        }
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    /// Maps every noisy and clean class through `map` (unlabeled stays).
    pub fn remap_classes(&self, map: &[u8]) -> Result<Dataset> {
        let c = self.spec.num_classes;
        if map.len() != c {
            return Err(Error::config(format!("class map has {} entries for {c} classes", map.len())));
        }
        let new_c = map.iter().map(|&v| v as usize + 1).max().unwrap_or(0);
        let apply = |m: &LabelMap| -> Result<LabelMap> {
            m.check_classes(c)?;
            let data = m
                .data()
                .iter()
                .map(|&v| if v == crate::labels::UNLABELED { v } else { map[v as usize] })
                .collect();
            LabelMap::new(m.batch(), m.height(), m.width(), data)
        };
        let mut out = self.clone();
        out.spec.num_classes = new_c;
        for loc in &mut out.locations {
            for l in &mut loc.labels {
                *l = apply(l)?;
            }
        }
        out.truth.clean = self.truth.clean.iter().map(apply).collect::<Result<_>>()?;
        Ok(out)
    }
}

impl EvalView<'_> {
    pub fn clean(&self, location: usize) -> &LabelMap {
        self.truth.clean(location)
    }
}

fn smooth_field(rng: &mut impl Rng, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let size = ((6.0 * sigma).ceil() as usize) | 1;
    let k = gaussian_kernel(size, sigma).expect("odd size and positive sigma");
    let white: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let f = blur_plane(&white, h, w, &k);
    let var = f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64;
    let s = var.sqrt().max(1e-12);
    f.into_iter().map(|v| v / s).collect()
}

/// A warped Voronoi partition with random class per cell.
pub fn voronoi_map(rng: &mut impl Rng, h: usize, w: usize, num_classes: usize) -> LabelMap {
    let cells = rng.random_range(8..16);
    let centers: Vec<(f64, f64, u8)> = (0..cells)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(0..num_classes) as u8,
            )
        })
        .collect();
    let amp = 0.06 * h.min(w) as f64;
    let sigma = 0.1 * h.min(w) as f64;
    let wy = smooth_field(rng, h, w, sigma);
    let wx = smooth_field(rng, h, w, sigma);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let py = y as f64 + amp * wy[y * w + x];
            let px = x as f64 + amp * wx[y * w + x];
            let nearest = centers
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - py).powi(2) + (a.1 - px).powi(2);
                    let db = (b.0 - py).powi(2) + (b.1 - px).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one cell");
            data.push(nearest.2);
        }
    }
    LabelMap::single(h, w, data).expect("extent matches")
}

/// Per-season, per-modality, per-channel offsets shared by all locations.
fn season_offsets(spec: &SceneSpec) -> Vec<[Vec<f64>; 2]> {
    let mut rng = stream(spec.seed, TAG_SEASON);
    (0..SEASONS)
        .map(|_| {
            [0, 1].map(|m| {
                (0..spec.modalities[m].channels)
                    .map(|_| 0.4 * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
        })
        .collect()
}

fn render(spec: &SceneSpec, labels: &LabelMap, modality: usize, offset: &[f64], rng: &mut impl Rng) -> Tensor {
    let (h, w) = (spec.height, spec.width);
    let ch = spec.modalities[modality].channels;
    let mut out = vec![0.0; ch * h * w];
    for c in 0..ch {
        let corr = smooth_field(rng, h, w, 1.5);
        for i in 0..h * w {
            let class = labels.data()[i] as usize;
            let iid: f64 = rng.sample(StandardNormal);
            out[c * h * w + i] = spec.class_mean(modality, class, c) + offset[c] + 0.6 * iid + 0.8 * corr[i];
        }
    }
    Tensor::new(vec![ch, h, w], out).expect("extent matches")
}

fn make_location(spec: &SceneSpec, id: usize, offsets: &[[Vec<f64>; 2]], noisy: bool) -> (Location, LabelMap) {
    let (h, w) = (spec.height, spec.width);
    let mut rng = stream2(spec.seed, TAG_LOCATION, id as u64);
    let clean = voronoi_map(&mut rng, h, w, spec.num_classes);
    let (rb, rs) = if noisy { spec.noise.rates() } else { (0.0, 0.0) };
    let drift = if noisy { spec.season_drift } else { 0.0 };
    let mut noise_rng = stream2(spec.seed, TAG_NOISE, id as u64);
    let eroded = noise::erode(&clean, rb, &mut noise_rng);
    let changed: Vec<bool> = eroded.data().iter().zip(clean.data()).map(|(a, b)| a != b).collect();
    let mut images = Vec::with_capacity(SEASONS);
    let mut labels = Vec::with_capacity(SEASONS);
    for (t, offset) in offsets.iter().enumerate() {
        let mut drift_rng = stream2(spec.seed, TAG_DRIFT, (id * SEASONS + t) as u64);
        let seasonal = noise::drift(&clean, drift, &mut drift_rng);
        images.push([
            render(spec, &seasonal, 0, &offset[0], &mut rng),
            render(spec, &seasonal, 1, &offset[1], &mut rng),
        ]);
        let mut merged = seasonal.clone();
        for (j, v) in merged.data_mut().iter_mut().enumerate() {
            if changed[j] {
                *v = eroded.data()[j];
            }
        }
        labels.push(noise::flip_rest(&merged, &changed, spec.num_classes, rs, &mut noise_rng));
    }
    (Location { id, images, labels }, clean)
}

/// Builds the full dataset deterministically from `spec.seed`.
pub fn generate(spec: &SceneSpec) -> Result<Dataset> {
    spec.validate()?;
    let offsets = season_offsets(spec);
    let total = spec.num_locations + spec.num_test;
    let mut locations = Vec::with_capacity(total);
    let mut clean = Vec::with_capacity(total);
    for id in 0..total {
        let (loc, c) = make_location(spec, id, &offsets, id < spec.num_locations);
        locations.push(loc);
        clean.push(c);
    }
    let splits = split(spec);
    let norm = [0, 1].map(|m| {
        NormStats::compute(splits.train.iter().flat_map(|&i| locations[i].images.iter().map(move |s| &s[m])))
    });
    let [n0, n1] = norm;
    Dataset::from_parts(spec.clone(), locations, splits, [n0?, n1?], GroundTruth::new(clean))
}

/// Seeded random train/validation partition of the first `num_locations`;
/// the rest form the test split.
fn split(spec: &SceneSpec) -> Splits {
    let mut ids: Vec<usize> = (0..spec.num_locations).collect();
    let mut rng = stream(spec.seed, TAG_SPLIT);
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let n_val = ((spec.val_fraction * spec.num_locations as f64).round() as usize).min(spec.num_locations - 1);
    let mut val: Vec<usize> = ids[..n_val].to_vec();
    let mut train: Vec<usize> = ids[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Splits {
        train,
        val,
        test: (spec.num_locations..spec.num_locations + spec.num_test).collect(),
    }
}

/// Fraction of pixels labeled in both maps where `b`'s class is one of the
/// classes `relation[a]` allows.
pub fn agreement_accuracy(a: &LabelMap, b: &LabelMap, relation: &[Vec<u8>]) -> Result<f64> {
    if a.data().len() != b.data().len() {
        return Err(Error::dim("agreement_accuracy", "masks differ in size"));
    }
    let (mut agree, mut total) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        if x == crate::labels::UNLABELED || y == crate::labels::UNLABELED {
            continue;
        }
        let allowed = relation
            .get(x as usize)
            .ok_or_else(|| Error::data(format!("class {x} missing from relation")))?;
        total += 1;
        if allowed.contains(&y) {
            agree += 1;
        }
    }
    if total == 0 {
        return Err(Error::data("no pixel is labeled in both masks"));
    }
    Ok(agree as f64 / total as f64)
}
