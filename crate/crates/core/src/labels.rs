//! Integer label maps and per-pixel class distributions.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class value marking a pixel without annotation.
pub const UNLABELED: u8 = 255;

/// Per-pixel class indices, laid out `[batch, height, width]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if batch * height * width != data.len() {
            return Err(Error::dim(
                "label_map",
                format!("{batch}x{height}x{width} needs {} labels, got {}", batch * height * width, data.len()),
            ));
        }
        Ok(LabelMap {
            batch,
            height,
            width,
            data,
        })
    }

    pub fn single(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(1, height, width, data)
    }

    pub fn filled(batch: usize, height: usize, width: usize, class: u8) -> Self {
        LabelMap {
            batch,
            height,
            width,
            data: vec![class; batch * height * width],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> u8 {
        self.data[(b * self.height + y) * self.width + x]
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != UNLABELED).count()
    }

    /// Errors if any labeled pixel names a class outside `0..num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != UNLABELED && v as usize >= num_classes) {
            Some(bad) => Err(Error::data(format!(
                "class id {bad} outside alphabet of {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// The `b`-th map as its own single-element batch.
    pub fn item(&self, b: usize) -> LabelMap {
        let p = self.plane();
        LabelMap {
            batch: 1,
            height: self.height,
            width: self.width,
            data: self.data[b * p..(b + 1) * p].to_vec(),
        }
    }

    /// Stacks equally sized maps along the batch axis.
    pub fn stack(maps: &[LabelMap]) -> Result<LabelMap> {
        let first = maps.first().ok_or_else(|| Error::data("cannot stack zero label maps"))?;
        let mut data = Vec::with_capacity(maps.iter().map(|m| m.data.len()).sum());
        for m in maps {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(Error::dim("stack", "label maps differ in spatial extent"));
            }
            data.extend_from_slice(&m.data);
        }
        LabelMap::new(maps.iter().map(|m| m.batch).sum(), first.height, first.width, data)
    }

    /// One-hot encoding; unlabeled pixels become all-zero columns.
    pub fn one_hot(&self, num_classes: usize) -> Result<SoftLabel> {
        self.check_classes(num_classes)?;
        let p = self.plane();
        let mut t = vec![0.0; self.batch * num_classes * p];
        for b in 0..self.batch {
            for i in 0..p {
                let y = self.data[b * p + i];
                if y != UNLABELED {
                    t[(b * num_classes + y as usize) * p + i] = 1.0;
                }
            }
        }
        SoftLabel::new(Tensor::new(vec![self.batch, num_classes, self.height, self.width], t)?)
    }
}

/// Per-pixel class distributions `[batch, classes, height, width]`; rows sum to
/// one at labeled pixels and are all zero at unlabeled ones.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel {
    values: Tensor,
}

impl SoftLabel {
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims4("soft_label")?;
        if values.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::domain("soft_label", "entries must be finite and nonnegative"));
        }
        Ok(SoftLabel { values })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.values.dims4("soft_label").expect("validated on construction")
    }

    /// Per-pixel channel sums, `[batch * height * width]`.
    pub fn pixel_sums(&self) -> Vec<f64> {
        let (b, c, h, w) = self.dims();
        let p = h * w;
        let d = self.values.data();
        let mut out = vec![0.0; b * p];
        for bi in 0..b {
            for k in 0..c {
                for i in 0..p {
                    out[bi * p + i] += d[(bi * c + k) * p + i];
                }
            }
        }
        out
    }

    /// 1.0 where the pixel carries a label distribution, else 0.0.
    pub fn labeled_mask(&self) -> Vec<f64> {
        self.pixel_sums().into_iter().map(|s| if s > 0.0 { 1.0 } else { 0.0 }).collect()
    }
}
