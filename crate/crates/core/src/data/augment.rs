use rand::Rng;

use super::Location;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::smooth::{SeasonalLabels, SEASONS};
use crate::tensor::Tensor;

/// A square crop followed by optional flips and a quarter-turn rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geom {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flip_x: bool,
    pub flip_y: bool,
    /// Number of counter-clockwise quarter turns.
    pub quarter_turns: u8,
}

impl Geom {
    pub fn identity(size: usize) -> Self {
        Geom {
            top: 0,
            left: 0,
            size,
            flip_x: false,
            flip_y: false,
            quarter_turns: 0,
        }
    }

    /// Random crop position, each flip with probability 0.5, and with
    /// probability 0.2 a rotation by one, two or three quarter turns.
    pub fn sample(rng: &mut impl Rng, h: usize, w: usize, size: usize) -> Result<Self> {
        if size == 0 || size > h || size > w {
            return Err(Error::config(format!("crop {size} does not fit a {h}x{w} tile")));
        }
        Ok(Geom {
            top: rng.random_range(0..=h - size),
            left: rng.random_range(0..=w - size),
            size,
            flip_x: rng.random_bool(0.5),
            flip_y: rng.random_bool(0.5),
            quarter_turns: if rng.random_bool(0.2) { rng.random_range(1..4) } else { 0 },
        })
    }

    /// Source pixel of output pixel `(y, x)` in a tile of width `w`.
    fn source(&self, y: usize, x: usize, w: usize) -> usize {
        let n = self.size;
        let (mut y, mut x) = (y, x);
        for _ in 0..self.quarter_turns {
            (y, x) = (x, n - 1 - y);
        }
        if self.flip_y {
            y = n - 1 - y;
        }
        if self.flip_x {
            x = n - 1 - x;
        }
        (self.top + y) * w + self.left + x
    }

    /// Transforms one `h x w` plane into a `size x size` plane.
    pub fn apply_plane<T: Copy>(&self, src: &[T], h: usize, w: usize) -> Vec<T> {
        debug_assert_eq!(src.len(), h * w);
        let n = self.size;
        (0..n * n).map(|i| src[self.source(i / n, i % n, w)]).collect()
    }

    /// Transforms every plane of a `[..., H, W]` tensor.
    pub fn apply_tensor(&self, t: &Tensor) -> Result<Tensor> {
        let r = t.rank();
        if r < 2 {
            return Err(Error::dim("augment", "tensor needs spatial axes"));
        }
        let (h, w) = (t.shape()[r - 2], t.shape()[r - 1]);
        if self.top + self.size > h || self.left + self.size > w {
            return Err(Error::config(format!("crop {} does not fit a {h}x{w} tile", self.size)));
        }
        let planes = t.numel() / (h * w);
        let mut out = Vec::with_capacity(planes * self.size * self.size);
        for p in 0..planes {
            out.extend(self.apply_plane(&t.data()[p * h * w..(p + 1) * h * w], h, w));
        }
        let mut shape = t.shape().to_vec();
        shape[r - 2] = self.size;
        shape[r - 1] = self.size;
        Tensor::new(shape, out)
    }

    pub fn apply_labels(&self, m: &LabelMap) -> Result<LabelMap> {
        let (h, w) = (m.height(), m.width());
        if self.top + self.size > h || self.left + self.size > w {
            return Err(Error::config(format!("crop {} does not fit a {h}x{w} tile", self.size)));
        }
        let p = h * w;
        let mut data = Vec::with_capacity(m.batch() * self.size * self.size);
        for b in 0..m.batch() {
            data.extend(self.apply_plane(&m.data()[b * p..(b + 1) * p], h, w));
        }
        LabelMap::new(m.batch(), self.size, self.size, data)
    }
}

/// A training sample after augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct AugSample {
    pub season: usize,
    pub geom: Geom,
    /// `[channels, size, size]` per modality.
    pub images: [Tensor; 2],
    /// Labels of the selected season.
    pub labels: LabelMap,
    /// All four seasonal label maps under the same transform.
    pub seasons: SeasonalLabels,
}

/// Picks a season uniformly and applies one random geometric transform
/// jointly to both images and every seasonal label map.
pub fn augment(loc: &Location, crop: usize, rng: &mut impl Rng) -> Result<AugSample> {
    if loc.images.len() != SEASONS || loc.labels.len() != SEASONS {
        return Err(Error::data(format!("location {} lacks seasons", loc.id)));
    }
    let season = rng.random_range(0..SEASONS);
    let (h, w) = (loc.labels[0].height(), loc.labels[0].width());
    let geom = Geom::sample(rng, h, w, crop)?;
    let images = [
        geom.apply_tensor(&loc.images[season][0])?,
        geom.apply_tensor(&loc.images[season][1])?,
    ];
    let seasons = loc.labels.iter().map(|m| geom.apply_labels(m)).collect::<Result<Vec<_>>>()?;
    Ok(AugSample {
        season,
        geom,
        images,
        labels: seasons[season].clone(),
        seasons: SeasonalLabels::new(seasons)?,
    })
}
