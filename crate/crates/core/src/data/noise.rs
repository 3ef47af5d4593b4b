use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, UNLABELED};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Each pixel independently moves to a uniformly chosen other class.
    Symmetric,
    /// Spatially coherent patches next to class boundaries take the
    /// neighbouring class.
    Boundary,
    /// Half the rate as boundary erosion, half as symmetric flips.
    Mixed,
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(NoiseKind::Symmetric),
            "boundary" => Ok(NoiseKind::Boundary),
            "mixed" => Ok(NoiseKind::Mixed),
            other => Err(Error::config(format!("unknown noise kind {other:?}"))),
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::Boundary => "boundary",
            NoiseKind::Mixed => "mixed",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
}

impl NoiseSpec {
    /// `(boundary rate, symmetric rate)`.
    pub(crate) fn rates(&self) -> (f64, f64) {
        match self.kind {
            NoiseKind::Symmetric => (0.0, self.rate),
            NoiseKind::Boundary => (self.rate, 0.0),
            NoiseKind::Mixed => (self.rate / 2.0, self.rate / 2.0),
        }
    }
}

const MAX_DISTANCE: usize = 3;

/// Chebyshev distance from each pixel to the nearest pixel of another
/// labeled class, capped at 3 (1 means a differing 8-neighbour).
pub fn boundary_distance(labels: &LabelMap) -> Vec<usize> {
    let (b, h, w) = (labels.batch(), labels.height(), labels.width());
    let mut out = vec![MAX_DISTANCE; b * h * w];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let c = labels.get(bi, y, x);
                if c == UNLABELED {
                    continue;
                }
                out[(bi * h + y) * w + x] = (1..MAX_DISTANCE)
                    .find(|&r| ring(y, x, r, h, w).any(|(yy, xx)| differs(labels.get(bi, yy, xx), c)))
                    .unwrap_or(MAX_DISTANCE);
            }
        }
    }
    out
}

fn differs(other: u8, c: u8) -> bool {
    other != c && other != UNLABELED
}

/// Pixels at Chebyshev distance exactly `r` that fall inside the tile.
fn ring(y: usize, x: usize, r: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let r = r as isize;
    let (y, x) = (y as isize, x as isize);
    (-r..=r)
        .flat_map(move |dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(move |&(dy, dx)| dy.abs().max(dx.abs()) == r)
        .map(move |(dy, dx)| (y + dy, x + dx))
        .filter(move |&(yy, xx)| yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize)
        .map(|(yy, xx)| (yy as usize, xx as usize))
}

/// Class of the nearest differing pixel within `radius`, first in scan order.
fn neighbour_class(labels: &LabelMap, bi: usize, y: usize, x: usize, radius: usize) -> Option<u8> {
    let c = labels.get(bi, y, x);
    (1..=radius).find_map(|r| {
        ring(y, x, r, labels.height(), labels.width())
            .map(|(yy, xx)| labels.get(bi, yy, xx))
            .find(|&o| differs(o, c))
    })
}

/// Relabels about `rate` of all pixels within two pixels of a boundary to
/// the neighbouring class, choosing pixels where a smooth random field is
/// highest so that the changes form connected patches.
pub(crate) fn erode(labels: &LabelMap, rate: f64, rng: &mut impl Rng) -> LabelMap {
    let mut out = labels.clone();
    if rate <= 0.0 {
        return out;
    }
    let (b, h, w) = (labels.batch(), labels.height(), labels.width());
    let dist = boundary_distance(labels);
    for bi in 0..b {
        let field = super::smooth_field(rng, h, w, 2.0);
        let mut cand: Vec<usize> = (0..h * w).filter(|&i| dist[bi * h * w + i] <= 2).collect();
        cand.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
        let k = ((rate * (h * w) as f64).round() as usize).min(cand.len());
        for &i in &cand[..k] {
            if let Some(c) = neighbour_class(labels, bi, i / w, i % w, 2) {
                out.data_mut()[bi * h * w + i] = c;
            }
        }
    }
    out
}

/// Each pixel adjacent to a boundary takes its neighbour's class with
/// probability `p`.
pub(crate) fn drift(labels: &LabelMap, p: f64, rng: &mut impl Rng) -> LabelMap {
    let mut out = labels.clone();
    if p <= 0.0 {
        return out;
    }
    let (b, h, w) = (labels.batch(), labels.height(), labels.width());
    let dist = boundary_distance(labels);
    for j in 0..b * h * w {
        if dist[j] == 1 && rng.random_bool(p) {
            let (bi, i) = (j / (h * w), j % (h * w));
            if let Some(c) = neighbour_class(labels, bi, i / w, i % w, 1) {
                out.data_mut()[j] = c;
            }
        }
    }
    out
}

/// Moves each labeled pixel with `eligible[j]` to a uniformly chosen other
/// class with probability `p`.
pub(crate) fn flip(labels: &LabelMap, num_classes: usize, p: f64, eligible: Option<&[bool]>, rng: &mut impl Rng) -> LabelMap {
    let mut out = labels.clone();
    if p <= 0.0 || num_classes < 2 {
        return out;
    }
    for (j, v) in out.data_mut().iter_mut().enumerate() {
        if *v == UNLABELED || eligible.is_some_and(|e| !e[j]) {
            continue;
        }
        if rng.random_bool(p.min(1.0)) {
            let k = rng.random_range(0..num_classes as u8 - 1);
            *v = if k >= *v { k + 1 } else { k };
        }
    }
    out
}

/// Erosion at the boundary share of the rate, then symmetric flips of the
/// untouched pixels so that the expected changed fraction is `rate`.
pub(crate) fn apply(clean: &LabelMap, num_classes: usize, spec: NoiseSpec, rng: &mut impl Rng) -> LabelMap {
    let (rb, rs) = spec.rates();
    let eroded = erode(clean, rb, rng);
    let changed: Vec<bool> = eroded.data().iter().zip(clean.data()).map(|(a, b)| a != b).collect();
    flip_rest(&eroded, &changed, num_classes, rs, rng)
}

/// Symmetric flips restricted to pixels not in `changed`, with the
/// probability raised so that `rate` of all pixels flip in expectation.
pub(crate) fn flip_rest(labels: &LabelMap, changed: &[bool], num_classes: usize, rate: f64, rng: &mut impl Rng) -> LabelMap {
    let n = changed.len().max(1);
    let free = changed.iter().filter(|&&c| !c).count();
    if free == 0 {
        return labels.clone();
    }
    let p = (rate * n as f64 / free as f64).min(1.0);
    let eligible: Vec<bool> = changed.iter().map(|&c| !c).collect();
    flip(labels, num_classes, p, Some(&eligible), rng)
}

/// Corrupts `clean` with the given noise model; deterministic in `seed`.
pub fn inject_noise(clean: &LabelMap, num_classes: usize, spec: NoiseSpec, seed: u64) -> Result<LabelMap> {
    if !(0.0..1.0).contains(&spec.rate) {
        return Err(Error::config(format!("noise rate {} outside [0, 1)", spec.rate)));
    }
    clean.check_classes(num_classes)?;
    Ok(apply(clean, num_classes, spec, &mut stream(seed, 0x1e5)))
}
