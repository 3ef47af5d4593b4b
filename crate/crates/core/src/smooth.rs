//! Spatial-temporal label smoothing.
//!
//! `Z' = (1 - beta - mu) Z + beta U + mu (M_s + M_t) / 2`, where `M_s` is the
//! one-hot map blurred by a Gaussian kernel and `M_t` is the blurred average
//! of the one-hot maps of all four seasons. Borders use half-sample
//! symmetric padding (`d c b a | a b c d`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, SoftLabel, UNLABELED};
use crate::tensor::Tensor;

pub const SEASONS: usize = 4;

/// A normalized separable Gaussian kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    taps: Vec<f64>,
}

impl Kernel {
    pub fn size(&self) -> usize {
        self.taps.len()
    }

    /// The 1-D factor; the 2-D kernel is its outer product with itself.
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn at(&self, dy: usize, dx: usize) -> f64 {
        self.taps[dy] * self.taps[dx]
    }

    /// Row-major `size x size` weights.
    pub fn to_2d(&self) -> Vec<f64> {
        let n = self.size();
        (0..n * n).map(|i| self.at(i / n, i % n)).collect()
    }
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Kernel> {
    if size % 2 == 0 {
        return Err(Error::config(format!("kernel size {size} must be odd")));
    }
    if !(sigma > 0.0) {
        return Err(Error::config(format!("kernel sigma {sigma} must be positive")));
    }
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    Ok(Kernel {
        taps: raw.into_iter().map(|v| v / s).collect(),
    })
}

/// A box kernel of equal taps.
pub fn flat_kernel(size: usize) -> Result<Kernel> {
    if size % 2 == 0 {
        return Err(Error::config(format!("kernel size {size} must be odd")));
    }
    Ok(Kernel {
        taps: vec![1.0 / size as f64; size],
    })
}

fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Blurs one `h x w` plane.
pub(crate) fn blur_plane(src: &[f64], h: usize, w: usize, k: &Kernel) -> Vec<f64> {
    let r = (k.size() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * src[y * w + mirror(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * tmp[mirror(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Blurs every class plane of `[1, C, H, W]` class weights. Where some
/// neighbours are unlabeled the result is renormalized by the blurred
/// labeled indicator; unlabeled pixels stay zero.
fn normalized_blur(planes: &[f64], labeled: &[f64], c: usize, h: usize, w: usize, k: &Kernel) -> Vec<f64> {
    let px = h * w;
    let support = blur_plane(labeled, h, w, k);
    let full = labeled.iter().all(|&v| v == 1.0);
    let mut out = vec![0.0; c * px];
    for cl in 0..c {
        let b = blur_plane(&planes[cl * px..(cl + 1) * px], h, w, k);
        for i in 0..px {
            out[cl * px + i] = if labeled[i] == 0.0 {
                0.0
            } else if full {
                b[i]
            } else {
                b[i] / support[i]
            };
        }
    }
    out
}

fn single_map(z: &LabelMap, op: &'static str) -> Result<()> {
    if z.batch() != 1 {
        return Err(Error::dim(op, format!("expects one label map, got a batch of {}", z.batch())));
    }
    Ok(())
}

fn indicator(z: &LabelMap) -> Vec<f64> {
    z.data().iter().map(|&v| if v == UNLABELED { 0.0 } else { 1.0 }).collect()
}

/// `M_s = Z * G` for a single label map.
pub fn spatial_mask(z: &LabelMap, num_classes: usize, k: &Kernel) -> Result<SoftLabel> {
    single_map(z, "spatial_mask")?;
    let onehot = z.one_hot(num_classes)?;
    let (h, w) = (z.height(), z.width());
    let v = normalized_blur(onehot.tensor().data(), &indicator(z), num_classes, h, w, k);
    SoftLabel::new(Tensor::new(vec![1, num_classes, h, w], v)?)
}

/// The label maps of one location at all four seasons.
#[derive(Clone, Debug, PartialEq)]
pub struct SeasonalLabels {
    seasons: Vec<LabelMap>,
}

impl SeasonalLabels {
    pub fn new(seasons: Vec<LabelMap>) -> Result<Self> {
        if seasons.len() != SEASONS {
            return Err(Error::data(format!("expected {SEASONS} seasonal label maps, got {}", seasons.len())));
        }
        for s in &seasons {
            single_map(s, "seasonal_labels")?;
            if (s.height(), s.width()) != (seasons[0].height(), seasons[0].width()) {
                return Err(Error::dim("seasonal_labels", "seasons differ in spatial extent"));
            }
        }
        Ok(SeasonalLabels { seasons })
    }

    pub fn season(&self, t: usize) -> &LabelMap {
        &self.seasons[t]
    }

    pub fn iter(&self) -> impl Iterator<Item = &LabelMap> {
        self.seasons.iter()
    }
}

/// `M_t = <Z>_t * G`: the blurred average of the seasonal one-hot maps.
/// Each pixel averages over the seasons in which it is labeled.
pub fn temporal_mask(seasons: &SeasonalLabels, num_classes: usize, k: &Kernel) -> Result<SoftLabel> {
    let first = seasons.season(0);
    let (h, w) = (first.height(), first.width());
    let px = h * w;
    let mut acc = vec![0.0; num_classes * px];
    let mut count = vec![0.0; px];
    for s in seasons.iter() {
        let oh = s.one_hot(num_classes)?;
        for (a, v) in acc.iter_mut().zip(oh.tensor().data()) {
            *a += v;
        }
        for (c, l) in count.iter_mut().zip(indicator(s)) {
            *c += l;
        }
    }
    for cl in 0..num_classes {
        for i in 0..px {
            if count[i] > 0.0 {
                acc[cl * px + i] /= count[i];
            }
        }
    }
    let labeled: Vec<f64> = count.iter().map(|&c| if c > 0.0 { 1.0 } else { 0.0 }).collect();
    let v = normalized_blur(&acc, &labeled, num_classes, h, w, k);
    SoftLabel::new(Tensor::new(vec![1, num_classes, h, w], v)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingParams {
    /// Weight of the uniform distribution.
    pub beta: f64,
    /// Weight of the spatial-temporal masks.
    pub mu: f64,
    pub kernel_size: usize,
    pub sigma: f64,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        SmoothingParams {
            beta: 0.05,
            mu: 0.15,
            kernel_size: 5,
            sigma: 1.0,
        }
    }
}

impl SmoothingParams {
    pub fn none() -> Self {
        SmoothingParams {
            beta: 0.0,
            mu: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.mu >= 0.0 && self.beta + self.mu <= 1.0) {
            return Err(Error::config(format!(
                "smoothing weights beta={} mu={} need beta, mu >= 0 and beta + mu <= 1",
                self.beta, self.mu
            )));
        }
        gaussian_kernel(self.kernel_size, self.sigma).map(|_| ())
    }

    pub fn kernel(&self) -> Result<Kernel> {
        gaussian_kernel(self.kernel_size, self.sigma)
    }
}

/// Smoothed target for the label map `z` of the chosen season. Unlabeled
/// pixels stay all-zero.
pub fn smooth(z: &LabelMap, seasons: &SeasonalLabels, num_classes: usize, params: &SmoothingParams) -> Result<SoftLabel> {
    params.validate()?;
    single_map(z, "smooth")?;
    let first = seasons.season(0);
    if (z.height(), z.width()) != (first.height(), first.width()) {
        return Err(Error::dim("smooth", "label map and seasons differ in spatial extent"));
    }
    let onehot = z.one_hot(num_classes)?;
    if params.beta == 0.0 && params.mu == 0.0 {
        return Ok(onehot);
    }
    let lab = indicator(z);
    let px = z.height() * z.width();
    let keep = 1.0 - params.beta - params.mu;
    let uniform = params.beta / num_classes as f64;
    let (ms, mt) = if params.mu > 0.0 {
        let k = params.kernel()?;
        (
            spatial_mask(z, num_classes, &k)?.into_tensor().into_data(),
            temporal_mask(seasons, num_classes, &k)?.into_tensor().into_data(),
        )
    } else {
        (vec![0.0; num_classes * px], vec![0.0; num_classes * px])
    };
    let zd = onehot.tensor().data();
    let mut out = vec![0.0; num_classes * px];
    for cl in 0..num_classes {
        for i in 0..px {
            if lab[i] == 0.0 {
                continue;
            }
            let j = cl * px + i;
            // a season may be unlabeled here while z is labeled
            let st = if mt_has_mass(&mt, num_classes, px, i) {
                0.5 * (ms[j] + mt[j])
            } else {
                ms[j]
            };
            out[j] = keep * zd[j] + uniform + params.mu * st;
        }
    }
    SoftLabel::new(Tensor::new(vec![1, num_classes, z.height(), z.width()], out)?)
}

fn mt_has_mass(mt: &[f64], c: usize, px: usize, i: usize) -> bool {
    (0..c).any(|cl| mt[cl * px + i] > 0.0)
}
