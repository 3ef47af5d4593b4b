//! Segmentation metrics, histogram KL, PCA variance curves and noise-flagging
//! statistics.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::{normalize, EvalView};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, UNLABELED};
use crate::loss::WeightMask;
use crate::model::ModelPair;
use crate::tensor::Tensor;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::dim("confusion", "count matrix must be square"));
        }
        Ok(ConfusionMatrix {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel labeled in `truth`.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.batch(), pred.height(), pred.width()) != (truth.batch(), truth.height(), truth.width()) {
            return Err(Error::dim("confusion", "prediction and truth differ in shape"));
        }
        truth.check_classes(self.classes)?;
        pred.check_classes(self.classes)?;
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t == UNLABELED || p == UNLABELED {
                continue;
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim("confusion", "class counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let c = self.classes;
        let total = self.total();
        let mut recall = vec![None; c];
        let mut iou = vec![None; c];
        let mut f1 = vec![None; c];
        let mut trace = 0;
        for k in 0..c {
            let tp = self.get(k, k);
            let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
            let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
            trace += tp;
            if row + col == 0 {
                continue;
            }
            let (fn_, fp) = (row - tp, col - tp);
            if row > 0 {
                recall[k] = Some(tp as f64 / row as f64);
            }
            iou[k] = Some(tp as f64 / (tp + fp + fn_) as f64);
            f1[k] = Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
        }
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        };
        MetricsReport {
            oa: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
            aa: mean(&recall),
            miou: mean(&iou),
            mf1: mean(&f1),
            recall,
            iou,
            f1,
            empty: total == 0,
        }
    }
}

/// Per-class entries are `None` for classes absent from truth and
/// prediction alike; such classes are left out of the means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    pub miou: f64,
    pub mf1: f64,
    pub recall: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
    pub f1: Vec<Option<f64>>,
    /// No labeled pixel was seen.
    pub empty: bool,
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 4] = ["oa", "aa", "miou", "mf1"];

    pub fn csv_values(&self) -> [f64; 4] {
        [self.oa, self.aa, self.miou, self.mf1]
    }
}

pub fn metrics(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<MetricsReport> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, truth)?;
    Ok(cm.report())
}

/// Arg-max over classes of `[B, C, H, W]` probabilities.
pub fn argmax_labels(probs: &Tensor) -> Result<LabelMap> {
    let (b, c, h, w) = probs.dims4("argmax")?;
    let px = h * w;
    let d = probs.data();
    let data = (0..b * px)
        .map(|j| {
            let (bi, i) = (j / px, j % px);
            let mut best = 0;
            for k in 1..c {
                if d[(bi * c + k) * px + i] > d[(bi * c + best) * px + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(b, h, w, data)
}

/// Stacks normalized `[ch, H, W]` images of one modality into a batch.
pub fn stack_images(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::data("cannot stack zero images"))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::dim("stack_images", "images differ in shape"));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(shape, data)
}

const EVAL_BATCH: usize = 8;

/// Scores modality `model_d` of `model` on every test tile and season of
/// data modality `data_d`, against the clean labels.
pub fn evaluate(model: &ModelPair, model_d: usize, data_d: usize, view: &EvalView<'_>) -> Result<MetricsReport> {
    let c = view.spec.num_classes;
    if model.config().num_classes != c {
        return Err(Error::config(format!(
            "model predicts {} classes, data has {c}",
            model.config().num_classes
        )));
    }
    let mut cm = ConfusionMatrix::new(c);
    let items: Vec<(usize, usize)> = view
        .test
        .iter()
        .flat_map(|&l| (0..view.locations[l].images.len()).map(move |s| (l, s)))
        .collect();
    for chunk in items.chunks(EVAL_BATCH) {
        let images = chunk
            .iter()
            .map(|&(l, s)| normalize(&view.locations[l].images[s][data_d], &view.norm[data_d]))
            .collect::<Result<Vec<_>>>()?;
        let probs = model.predict(model_d, stack_images(&images)?)?;
        let pred = argmax_labels(&probs)?;
        let truth = LabelMap::stack(&chunk.iter().map(|&(l, _)| view.clean(l).clone()).collect::<Vec<_>>())?;
        cm.accumulate(&pred, &truth)?;
    }
    Ok(cm.report())
}

pub const HIST_BINS: usize = 100;
pub const HIST_EPS: f64 = 1e-10;

/// `KL(A || B)` between histograms of the two samples over shared, evenly
/// spaced bins spanning their combined range. Empty bins get mass `eps`.
pub fn hist_kl(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::data("hist_kl needs two nonempty samples"));
    }
    if bins == 0 {
        return Err(Error::config("hist_kl needs at least one bin"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::domain("hist_kl", "samples must be finite"));
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(0.0);
    }
    let hist = |s: &[f64]| {
        let mut h = vec![0.0; bins];
        for &v in s {
            let k = (((v - lo) / (hi - lo)) * bins as f64) as usize;
            h[k.min(bins - 1)] += 1.0;
        }
        let smoothed: Vec<f64> = h.iter().map(|&n| if n == 0.0 { HIST_EPS } else { n / s.len() as f64 }).collect();
        let z: f64 = smoothed.iter().sum();
        smoothed.into_iter().map(|p| p / z).collect::<Vec<_>>()
    };
    let (p, q) = (hist(a), hist(b));
    Ok(p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>().max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaCurve {
    /// Cumulative explained-variance fraction after 1, 2, ... components.
    pub curve: Vec<f64>,
    /// The covariance was zero; the curve is all ones.
    pub degenerate: bool,
}

pub fn pca_accumulated_variance(features: &[Vec<f64>]) -> Result<PcaCurve> {
    if features.len() < 2 {
        return Err(Error::data("PCA needs at least two vectors"));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::dim("pca", "feature vectors must share a positive dimension"));
    }
    let n = features.len();
    let mut x = DMatrix::from_fn(n, dim, |i, j| features[i][j]);
    for j in 0..dim {
        let m = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-m);
    }
    let cov = (x.transpose() * &x) / (n - 1) as f64;
    let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = ev.iter().sum();
    if total <= 0.0 {
        return Ok(PcaCurve {
            curve: vec![1.0; dim],
            degenerate: true,
        });
    }
    let mut acc = 0.0;
    let mut curve: Vec<f64> = ev
        .iter()
        .map(|v| {
            acc += v;
            (acc / total).min(1.0)
        })
        .collect();
    *curve.last_mut().unwrap() = 1.0;
    Ok(PcaCurve { curve, degenerate: false })
}

/// Pixels with weight below one count as flagged; labeled pixels whose
/// noisy label differs from the clean one count as noisy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseDetection {
    pub labeled: u64,
    pub flagged: u64,
    pub noisy: u64,
    pub flagged_noisy: u64,
    /// `None` when nothing was flagged.
    pub precision: Option<f64>,
    /// `None` when no pixel is noisy.
    pub recall: Option<f64>,
}

impl NoiseDetection {
    pub fn merge(&self, other: &NoiseDetection) -> NoiseDetection {
        NoiseDetection::from_counts(
            self.labeled + other.labeled,
            self.flagged + other.flagged,
            self.noisy + other.noisy,
            self.flagged_noisy + other.flagged_noisy,
        )
    }

    fn from_counts(labeled: u64, flagged: u64, noisy: u64, flagged_noisy: u64) -> Self {
        NoiseDetection {
            labeled,
            flagged,
            noisy,
            flagged_noisy,
            precision: (flagged > 0).then(|| flagged_noisy as f64 / flagged as f64),
            recall: (noisy > 0).then(|| flagged_noisy as f64 / noisy as f64),
        }
    }
}

pub fn noise_detection_report(w_l: &WeightMask, clean: &LabelMap, noisy: &LabelMap) -> Result<NoiseDetection> {
    let dims = (noisy.batch(), noisy.height(), noisy.width());
    if w_l.dims() != dims || (clean.batch(), clean.height(), clean.width()) != dims {
        return Err(Error::dim("noise_detection", "mask and label maps differ in shape"));
    }
    let (mut labeled, mut flagged, mut bad, mut hit) = (0, 0, 0, 0);
    for ((&w, &c), &n) in w_l.values().iter().zip(clean.data()).zip(noisy.data()) {
        if n == UNLABELED || c == UNLABELED {
            continue;
        }
        labeled += 1;
        let f = w < 1.0;
        let e = c != n;
        flagged += f as u64;
        bad += e as u64;
        hit += (f && e) as u64;
    }
    Ok(NoiseDetection::from_counts(labeled, flagged, bad, hit))
}

/// Writes `header` and `rows` as CSV.
pub fn write_csv<W: Write>(w: W, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header).map_err(csv_err)?;
    for r in rows {
        out.write_record(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::format(format!("csv: {e}"))
}

/// Two-column CSV of a curve, components counted from 1.
pub fn write_curve_csv<W: Write>(w: W, x_name: &str, y_name: &str, curve: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> = curve
        .iter()
        .enumerate()
        .map(|(i, v)| vec![(i + 1).to_string(), format!("{v:?}")])
        .collect();
    write_csv(w, &[x_name, y_name], &rows)
}

#[cfg(test)]
mod tests;
