//! Deterministic synthetic data: identity clusters on the unit sphere,
//! binary glyph images, and verification pair lists.
//!
//! Every random draw comes from a stream derived from `(seed, purpose,
//! class, sample)`, so any subset of samples can be regenerated without
//! replaying the rest.

use std::collections::HashSet;

use ndarray::{Array2, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::shortest;
use crate::nn::{Dataset, NnError};
use crate::rng::SplitMix64;

/// Centers closer than this (radians) are redrawn.
pub const MIN_CENTER_ANGLE: f64 = 0.1;
const MAX_CENTER_ATTEMPTS: u64 = 10_000;
/// Glyph templates are drawn on this coarse grid and upscaled.
const GLYPH_CELLS: usize = 7;

const CENTER_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;
const PAIR_STREAM: u64 = 3;
const GLYPH_STREAM: u64 = 4;
const PIXEL_STREAM: u64 = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid data configuration: {0}")]
    ConfigInvalid(String),
    #[error("requested {requested} {kind} pairs but only {available} exist")]
    InsufficientSamples {
        kind: &'static str,
        requested: usize,
        available: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereDatasetSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SphereDatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes < 2 || self.dim < 2 {
            return Err(DataError::ConfigInvalid(format!(
                "need ≥ 2 classes and ≥ 2 dimensions, got {} and {}",
                self.classes, self.dim
            )));
        }
        if self.samples_per_class == 0 {
            return Err(DataError::ConfigInvalid("samples_per_class must be ≥ 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DataError::ConfigInvalid(format!(
                "noise_sigma must be ≥ 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Unit-norm features, one row per sample, grouped by class.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub centers: Array2<f64>,
}

impl SphereDataset {
    pub fn to_csv(&self) -> String {
        labelled_rows_csv(self.features.view(), &self.labels)
    }

    pub fn to_dataset(&self) -> Result<Dataset, NnError> {
        Dataset::new(
            self.features.clone().into_dyn(),
            self.labels.clone(),
            self.centers.nrows(),
        )
    }
}

fn labelled_rows_csv(rows: ArrayView2<f64>, labels: &[usize]) -> String {
    let mut out = String::from("label");
    for j in 0..rows.ncols() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (row, label) in rows.axis_iter(Axis(0)).zip(labels) {
        out.push_str(&label.to_string());
        for v in row {
            out.push(',');
            out.push_str(&shortest(*v));
        }
        out.push('\n');
    }
    out
}

fn unit_gaussian(rng: &mut SplitMix64, dim: usize) -> Option<Vec<f64>> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0).then(|| v.into_iter().map(|x| x / n).collect())
}

fn draw_centers(spec: &SphereDatasetSpec) -> Result<Array2<f64>, DataError> {
    let root = SplitMix64::new(spec.seed);
    let min_cos = MIN_CENTER_ANGLE.cos();
    let mut centers = Array2::zeros((spec.classes, spec.dim));
    for c in 0..spec.classes {
        let accepted = (0..MAX_CENTER_ATTEMPTS).find_map(|attempt| {
            let mut rng = root.derive(&[CENTER_STREAM, c as u64, attempt]);
            let v = unit_gaussian(&mut rng, spec.dim)?;
            let clash = centers
                .axis_iter(Axis(0))
                .take(c)
                .any(|other| other.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() > min_cos);
            (!clash).then_some(v)
        });
        let v = accepted.ok_or_else(|| {
            DataError::ConfigInvalid(format!(
                "could not place {} centers {MIN_CENTER_ANGLE} rad apart in {} dimensions",
                spec.classes, spec.dim
            ))
        })?;
        centers.row_mut(c).assign(&ndarray::Array1::from(v));
    }
    Ok(centers)
}

/// `samples_per_class` samples per class, class-major.
pub fn gen_sphere_dataset(spec: &SphereDatasetSpec) -> Result<SphereDataset, DataError> {
    gen_sphere_samples(spec, 0, spec.samples_per_class)
}

/// Samples `first..first + count` of every class. Disjoint ranges give
/// disjoint draws around the same centers, which is how held-out sets are
/// built.
pub fn gen_sphere_samples(spec: &SphereDatasetSpec, first: usize, count: usize) -> Result<SphereDataset, DataError> {
    spec.validate()?;
    let centers = draw_centers(spec)?;
    let root = SplitMix64::new(spec.seed);
    let mut features = Array2::zeros((spec.classes * count, spec.dim));
    let mut labels = Vec::with_capacity(spec.classes * count);
    for c in 0..spec.classes {
        let center = centers.row(c);
        for k in 0..count {
            let mut row = features.row_mut(labels.len());
            if spec.noise_sigma == 0.0 {
                row.assign(&center);
            } else {
                let mut rng = root.derive(&[SAMPLE_STREAM, c as u64, (first + k) as u64]);
                let v: Vec<f64> = center.iter().map(|x| x + spec.noise_sigma * rng.gaussian()).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n == 0.0 {
                    row.assign(&center);
                } else {
                    row.iter_mut().zip(&v).for_each(|(r, x)| *r = x / n);
                }
            }
            labels.push(c);
        }
    }
    Ok(SphereDataset {
        features,
        labels,
        centers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub fold: usize,
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairProtocol {
    pub pairs: Vec<Pair>,
    pub folds: usize,
}

impl PairProtocol {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,idx_a,idx_b,same\n");
        for p in &self.pairs {
            out.push_str(&format!("{},{},{},{}\n", p.fold, p.a, p.b, u8::from(p.same)));
        }
        out
    }
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Draws `n_pos` same-label and `n_neg` different-label index pairs, no pair
/// twice, and deals each kind round-robin into `folds` folds so every fold
/// gets both kinds and fold sizes differ by at most one per kind. Pairs are
/// listed fold by fold.
pub fn gen_pair_protocol(
    labels: &[usize],
    n_pos: usize,
    n_neg: usize,
    folds: usize,
    seed: u64,
) -> Result<PairProtocol, DataError> {
    if folds == 0 {
        return Err(DataError::ConfigInvalid("folds must be ≥ 1".into()));
    }
    if n_pos < folds || n_neg < folds {
        return Err(DataError::ConfigInvalid(format!(
            "{folds} folds need at least {folds} positive and {folds} negative pairs"
        )));
    }
    let mut rng = SplitMix64::new(seed).derive(&[PAIR_STREAM]);
    let n = labels.len();

    let mut positives = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] {
                positives.push((i, j));
            }
        }
    }
    let total = n * n.saturating_sub(1) / 2;
    let neg_available = total - positives.len();
    if positives.len() < n_pos {
        return Err(DataError::InsufficientSamples {
            kind: "positive",
            requested: n_pos,
            available: positives.len(),
        });
    }
    if neg_available < n_neg {
        return Err(DataError::InsufficientSamples {
            kind: "negative",
            requested: n_neg,
            available: neg_available,
        });
    }
    rng.shuffle(&mut positives);
    positives.truncate(n_pos);

    let negatives = if 2 * n_neg <= neg_available {
        let mut seen = HashSet::with_capacity(n_neg);
        let mut out = Vec::with_capacity(n_neg);
        while out.len() < n_neg {
            let a = rng.below(n as u64) as usize;
            let b = rng.below(n as u64) as usize;
            if labels[a] != labels[b] && seen.insert(ordered(a, b)) {
                out.push(ordered(a, b));
            }
        }
        out
    } else {
        let mut all = Vec::with_capacity(neg_available);
        for i in 0..n {
            for j in i + 1..n {
                if labels[i] != labels[j] {
                    all.push((i, j));
                }
            }
        }
        rng.shuffle(&mut all);
        all.truncate(n_neg);
        all
    };

    let mut pairs: Vec<Pair> = positives
        .iter()
        .enumerate()
        .map(|(k, &(a, b))| Pair {
            fold: k % folds,
            a,
            b,
            same: true,
        })
        .chain(negatives.iter().enumerate().map(|(k, &(a, b))| Pair {
            fold: k % folds,
            a,
            b,
            same: false,
        }))
        .collect();
    pairs.sort_by_key(|p| p.fold);
    Ok(PairProtocol { pairs, folds })
}

/// Images are `N × 1 × size × size`, class-major; templates are
/// `classes × 1 × size × size`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphSet {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub templates: Array4<f64>,
}

impl GlyphSet {
    /// Copies the single channel `channels` times.
    pub fn with_channels(&self, channels: usize) -> Array4<f64> {
        let (n, _, h, w) = self.images.dim();
        Array4::from_shape_fn((n, channels, h, w), |(i, _, y, x)| self.images[[i, 0, y, x]])
    }

    pub fn to_csv(&self) -> String {
        let n = self.images.shape()[0];
        let flat = self
            .images
            .view()
            .into_shape_with_order((n, self.images.len() / n.max(1)))
            .expect("contiguous images");
        labelled_rows_csv(flat, &self.labels)
    }

    pub fn to_dataset(&self, channels: usize) -> Result<Dataset, NnError> {
        Dataset::new(
            self.with_channels(channels).into_dyn(),
            self.labels.clone(),
            self.templates.shape()[0],
        )
    }
}

pub fn gen_glyph_images(
    classes: usize,
    size: usize,
    samples_per_class: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<GlyphSet, DataError> {
    if size != 28 && size != 56 {
        return Err(DataError::ConfigInvalid(format!("glyph size must be 28 or 56, got {size}")));
    }
    if classes == 0 || samples_per_class == 0 {
        return Err(DataError::ConfigInvalid("classes and samples_per_class must be ≥ 1".into()));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(DataError::ConfigInvalid(format!("noise_sigma must be ≥ 0, got {noise_sigma}")));
    }
    let root = SplitMix64::new(seed);
    let cell = size / GLYPH_CELLS;
    let mut bitmaps: Vec<Vec<bool>> = Vec::with_capacity(classes);
    for c in 0..classes {
        let bitmap = (0..MAX_CENTER_ATTEMPTS)
            .map(|attempt| {
                let mut rng = root.derive(&[GLYPH_STREAM, c as u64, attempt]);
                (0..GLYPH_CELLS * GLYPH_CELLS).map(|_| rng.next_u64() >> 63 == 1).collect::<Vec<_>>()
            })
            .find(|b| b.iter().any(|&on| on) && !bitmaps.contains(b))
            .ok_or_else(|| DataError::ConfigInvalid(format!("could not draw {classes} distinct glyphs")))?;
        bitmaps.push(bitmap);
    }
    let templates = Array4::from_shape_fn((classes, 1, size, size), |(c, _, y, x)| {
        f64::from(u8::from(bitmaps[c][(y / cell) * GLYPH_CELLS + x / cell]))
    });
    let n = classes * samples_per_class;
    let mut images = Array4::zeros((n, 1, size, size));
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        for k in 0..samples_per_class {
            let i = labels.len();
            let mut rng = root.derive(&[PIXEL_STREAM, c as u64, k as u64]);
            let mut img = images.index_axis_mut(Axis(0), i);
            img.assign(&templates.index_axis(Axis(0), c));
            if noise_sigma > 0.0 {
                img.mapv_inplace(|v| (v + noise_sigma * rng.gaussian()).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Ok(GlyphSet {
        images,
        labels,
        templates,
    })
}
