//! Angular-margin softmax losses.
//!
//! Every angular variant normalizes embedding rows of `X` and class-center
//! columns of `W`, turns each cosine into a logit, and applies a numerically
//! stable softmax cross-entropy. Only the logit transform differs:
//!
//! | variant          | target logit                   | non-target logit |
//! |------------------|--------------------------------|------------------|
//! | `NSoftmax`       | `s cos θ`                      | `s cos θ`        |
//! | `CosFace`        | `s (cos θ − m)`                | `s cos θ`        |
//! | `ArcFace`        | `s cos(θ + m)`                 | `s cos θ`        |
//! | `LiArcFace`      | `s (π − 2(θ + m)) / π`         | `s (π − 2θ) / π` |
//! | `CombinedMargin` | `s (cos(m1 θ + m2) − m3)`      | `s cos θ`        |
//!
//! Gradients are returned with respect to the raw (unnormalized) inputs.

mod analysis;

pub use analysis::{curve_to_csv, logit_curve_table, overlap_map, CurveRow, OverlapMap};

use std::f64::consts::PI;
use std::fmt;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sphere::{clamped_acos_with_grad, Angle, ZERO_NORM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{0} has no angular logit transform; use the linear softmax head")]
    UnsupportedRole(LossVariant),
    #[error("zero-norm {what} at index {index}")]
    ZeroVector { what: &'static str, index: usize },
    #[error("label {label} at sample {index} is outside [0, {classes})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid loss spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossVariant {
    #[serde(rename = "softmax")]
    Softmax,
    #[serde(rename = "n-softmax")]
    NSoftmax,
    #[serde(rename = "cosface")]
    CosFace,
    #[serde(rename = "arcface")]
    ArcFace,
    #[serde(rename = "li-arcface")]
    LiArcFace,
    #[serde(rename = "combined")]
    CombinedMargin,
}

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Softmax => "softmax",
            LossVariant::NSoftmax => "n-softmax",
            LossVariant::CosFace => "cosface",
            LossVariant::ArcFace => "arcface",
            LossVariant::LiArcFace => "li-arcface",
            LossVariant::CombinedMargin => "combined",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_scale() -> f64 {
    64.0
}

fn default_one() -> f64 {
    1.0
}

/// A loss variant with its scale and margin parameters.
///
/// `m` is the margin for `CosFace`, `ArcFace` and `LiArcFace`; `m1`, `m2`,
/// `m3` are only read by `CombinedMargin`. `arcface_clip` swaps the naive
/// `cos(θ + m)` for `cos θ − m sin m` once `θ + m > π`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginLossSpec {
    pub variant: LossVariant,
    #[serde(default = "default_scale")]
    pub s: f64,
    #[serde(default)]
    pub m: f64,
    #[serde(default = "default_one")]
    pub m1: f64,
    #[serde(default)]
    pub m2: f64,
    #[serde(default)]
    pub m3: f64,
    #[serde(default)]
    pub arcface_clip: bool,
}

impl MarginLossSpec {
    fn with(variant: LossVariant, s: f64, m: f64) -> Self {
        Self {
            variant,
            s,
            m,
            m1: 1.0,
            m2: 0.0,
            m3: 0.0,
            arcface_clip: false,
        }
    }

    pub fn softmax() -> Self {
        Self::with(LossVariant::Softmax, 1.0, 0.0)
    }

    pub fn n_softmax(s: f64) -> Self {
        Self::with(LossVariant::NSoftmax, s, 0.0)
    }

    pub fn cosface(s: f64, m: f64) -> Self {
        Self::with(LossVariant::CosFace, s, m)
    }

    pub fn arcface(s: f64, m: f64) -> Self {
        Self::with(LossVariant::ArcFace, s, m)
    }

    pub fn arcface_clipped(s: f64, m: f64) -> Self {
        Self {
            arcface_clip: true,
            ..Self::with(LossVariant::ArcFace, s, m)
        }
    }

    pub fn li_arcface(s: f64, m: f64) -> Self {
        Self::with(LossVariant::LiArcFace, s, m)
    }

    pub fn combined(s: f64, m1: f64, m2: f64, m3: f64) -> Self {
        Self {
            m1,
            m2,
            m3,
            ..Self::with(LossVariant::CombinedMargin, s, 0.0)
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |msg: String| Err(LossError::InvalidSpec(msg));
        if self.variant == LossVariant::Softmax {
            return Ok(());
        }
        if !(self.s > 0.0 && self.s.is_finite()) {
            return bad(format!("scale must be positive and finite, got {}", self.s));
        }
        match self.variant {
            LossVariant::ArcFace | LossVariant::LiArcFace if !(0.0..PI / 2.0).contains(&self.m) => {
                bad(format!("angular margin must lie in [0, π/2), got {}", self.m))
            }
            LossVariant::CosFace if !(0.0..1.0).contains(&self.m) => {
                bad(format!("cosine margin must lie in [0, 1), got {}", self.m))
            }
            LossVariant::CombinedMargin
                if ![self.m1, self.m2, self.m3].iter().all(|v| v.is_finite()) =>
            {
                bad("combined margins must be finite".into())
            }
            _ => Ok(()),
        }
    }

    /// True when the logit is an affine function of the cosine, so no
    /// arccos is needed for either the value or the gradient.
    fn affine_in_cos(&self, is_target: bool) -> bool {
        match self.variant {
            LossVariant::NSoftmax | LossVariant::CosFace => true,
            LossVariant::LiArcFace => false,
            _ => !is_target,
        }
    }
}

/// Logit for a sample at angle `theta` from a class center.
pub fn margin_logits(spec: &MarginLossSpec, theta: Angle, is_target: bool) -> Result<f64, LossError> {
    logit_and_slope(spec, theta.radians(), is_target).map(|(z, _)| z)
}

/// Derivative of the logit with respect to the angle.
pub fn margin_logit_slope(
    spec: &MarginLossSpec,
    theta: Angle,
    is_target: bool,
) -> Result<f64, LossError> {
    logit_and_slope(spec, theta.radians(), is_target).map(|(_, dz)| dz)
}

fn logit_and_slope(spec: &MarginLossSpec, t: f64, is_target: bool) -> Result<(f64, f64), LossError> {
    let s = spec.s;
    let m = spec.m;
    let cos_logit = (s * t.cos(), -s * t.sin());
    let out = match (spec.variant, is_target) {
        (LossVariant::Softmax, _) => return Err(LossError::UnsupportedRole(LossVariant::Softmax)),
        (LossVariant::LiArcFace, true) => (s * (PI - 2.0 * (t + m)) / PI, -2.0 * s / PI),
        (LossVariant::LiArcFace, false) => (s * (PI - 2.0 * t) / PI, -2.0 * s / PI),
        (_, false) | (LossVariant::NSoftmax, true) => cos_logit,
        (LossVariant::CosFace, true) => (s * (t.cos() - m), -s * t.sin()),
        (LossVariant::ArcFace, true) => {
            if spec.arcface_clip && t + m > PI {
                (s * (t.cos() - m * m.sin()), -s * t.sin())
            } else {
                (s * (t + m).cos(), -s * (t + m).sin())
            }
        }
        (LossVariant::CombinedMargin, true) => {
            let a = spec.m1 * t + spec.m2;
            (s * (a.cos() - spec.m3), -s * spec.m1 * a.sin())
        }
    };
    Ok(out)
}

/// Logit, `dz/dc` and the clamped angle for a raw cosine `c`.
fn logit_from_cos(spec: &MarginLossSpec, c: f64, is_target: bool) -> Result<(f64, f64, Angle), LossError> {
    let (theta, dtheta_dc) = clamped_acos_with_grad(c);
    if spec.affine_in_cos(is_target) {
        let shift = if is_target && spec.variant == LossVariant::CosFace {
            spec.m
        } else {
            0.0
        };
        return Ok((spec.s * (c - shift), spec.s, theta));
    }
    let (z, dz_dtheta) = logit_and_slope(spec, theta.radians(), is_target)?;
    Ok((z, dz_dtheta * dtheta_dc, theta))
}

/// Result of one loss evaluation over a batch.
#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Mean cross-entropy in nats.
    pub loss: f64,
    /// Softmax probabilities, one row per sample.
    pub probabilities: Array2<f64>,
    /// Gradient with respect to the raw embeddings (`N × d`).
    pub grad_x: Array2<f64>,
    /// Gradient with respect to the raw class centers (`d × n`).
    pub grad_w: Array2<f64>,
    pub target_angles: Vec<Angle>,
}

/// Unit rows plus the original row norms.
pub(crate) fn normalize_rows(a: ArrayView2<f64>, what: &'static str) -> Result<(Array2<f64>, Vec<f64>), LossError> {
    let mut out = a.to_owned();
    let mut norms = Vec::with_capacity(a.nrows());
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n >= ZERO_NORM) {
            return Err(LossError::ZeroVector { what, index: i });
        }
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Pulls a gradient taken w.r.t. unit rows back to the raw rows:
/// `(g − (g·u) u) / ‖x‖`.
pub(crate) fn project_rows(grad: &mut Array2<f64>, unit: &Array2<f64>, norms: &[f64]) {
    for ((mut g, u), &n) in grad.axis_iter_mut(Axis(0)).zip(unit.axis_iter(Axis(0))).zip(norms) {
        let radial = g.dot(&u);
        g.zip_mut_with(&u, |gv, &uv| *gv = (*gv - radial * uv) / n);
    }
}

/// Stable softmax cross-entropy for one row of logits.
///
/// Returns `(−log p_target, probabilities, dL/dz)` where the target entry of
/// `dL/dz` is accumulated as `−Σ_{j≠y} p_j` so it stays non-zero even when
/// `p_target` rounds to 1.
pub(crate) fn cross_entropy_row(logits: &[f64], target: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let nll = if logits[target] == max {
        // ln(1 + Σ_{j≠y} e^{z_j − z_y}) keeps a small loss at full precision.
        let rest: f64 = exps
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != target)
            .map(|(_, e)| e)
            .sum();
        rest.ln_1p()
    } else {
        max + sum.ln() - logits[target]
    };
    let mut grad = probs.clone();
    grad[target] = -probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, p)| p)
        .sum::<f64>();
    (nll, probs, grad)
}

fn check_finite(a: ArrayView2<f64>, what: &'static str) -> Result<(), LossError> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LossError::NonFiniteInput(what))
    }
}

pub(crate) fn check_labels(labels: &[usize], classes: usize) -> Result<(), LossError> {
    for (index, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(LossError::LabelOutOfRange {
                index,
                label,
                classes,
            });
        }
    }
    Ok(())
}

/// Mean margin cross-entropy over a batch with exact gradients.
///
/// `x` holds one raw embedding per row (`N × d`); `w` holds one raw class
/// center per column (`d × n`).
pub fn loss_forward_backward(
    spec: &MarginLossSpec,
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    labels: &[usize],
) -> Result<LossOutput, LossError> {
    spec.validate()?;
    if spec.variant == LossVariant::Softmax {
        return Err(LossError::UnsupportedRole(LossVariant::Softmax));
    }
    let (batch, dim) = x.dim();
    let classes = w.ncols();
    if batch == 0 {
        return Err(LossError::ShapeMismatch("empty batch".into()));
    }
    if dim < 2 || w.nrows() != dim {
        return Err(LossError::ShapeMismatch(format!(
            "embeddings are {batch}×{dim}, centers are {}×{classes}",
            w.nrows()
        )));
    }
    if labels.len() != batch {
        return Err(LossError::ShapeMismatch(format!(
            "{} labels for {batch} samples",
            labels.len()
        )));
    }
    check_finite(x, "embeddings")?;
    check_finite(w, "class centers")?;
    check_labels(labels, classes)?;

    let (xu, x_norms) = normalize_rows(x, "embedding")?;
    let (wu_t, w_norms) = normalize_rows(w.t(), "class center")?;
    let cosines = xu.dot(&wu_t.t());

    let inv_n = 1.0 / batch as f64;
    let mut probabilities = Array2::zeros((batch, classes));
    let mut grad_c = Array2::zeros((batch, classes));
    let mut target_angles = Vec::with_capacity(batch);
    let mut total = 0.0;
    let mut logits = vec![0.0; classes];
    let mut slopes = vec![0.0; classes];
    for i in 0..batch {
        let y = labels[i];
        for j in 0..classes {
            let (z, dz, theta) = logit_from_cos(spec, cosines[[i, j]], j == y)?;
            logits[j] = z;
            slopes[j] = dz;
            if j == y {
                target_angles.push(theta);
            }
        }
        let (nll, probs, dz) = cross_entropy_row(&logits, y);
        total += nll;
        for j in 0..classes {
            probabilities[[i, j]] = probs[j];
            grad_c[[i, j]] = dz[j] * slopes[j] * inv_n;
        }
    }

    let mut grad_x = grad_c.dot(&wu_t);
    project_rows(&mut grad_x, &xu, &x_norms);
    let mut grad_w_t = grad_c.t().dot(&xu);
    project_rows(&mut grad_w_t, &wu_t, &w_norms);

    Ok(LossOutput {
        loss: total * inv_n,
        probabilities,
        grad_x,
        grad_w: grad_w_t.reversed_axes(),
        target_angles,
    })
}
