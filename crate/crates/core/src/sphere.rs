//! Geometry on the unit hypersphere.
//!
//! Every angular loss in this crate works on L2-normalized embeddings and
//! class centers. The helpers here keep the arccos and its derivative finite
//! by clamping cosines away from ±1.

use std::f64::consts::PI;
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Cosines are clamped to `[-1 + ACOS_CLAMP, 1 - ACOS_CLAMP]` before `acos`.
pub const ACOS_CLAMP: f64 = 1e-7;

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Raw dot products within this many ulps of ±1 report an exact 0 or π.
const EXACT_DOT_ULPS: f64 = 8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SphereError {
    #[error("vector norm {norm:e} is below {ZERO_NORM:e}")]
    ZeroVector { norm: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("vectors on the sphere need at least 2 components, got {0}")]
    TooFewDimensions(usize),
}

/// An L2-normalized vector of dimension ≥ 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &UnitVector) -> Result<f64, SphereError> {
        if self.dim() != other.dim() {
            return Err(SphereError::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        Ok(dot(&self.0, &other.0))
    }
}

impl Deref for UnitVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// An angle in radians, always within `[0, π]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Angle(f64);

impl Angle {
    /// Builds an angle, rejecting values outside `[0, π]` or NaN.
    pub fn new(theta: f64) -> Option<Self> {
        (0.0..=PI).contains(&theta).then_some(Self(theta))
    }

    pub fn radians(self) -> f64 {
        self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn normalize(v: &[f64]) -> Result<UnitVector, SphereError> {
    if v.len() < 2 {
        return Err(SphereError::TooFewDimensions(v.len()));
    }
    let n = norm(v);
    if !(n >= ZERO_NORM) {
        return Err(SphereError::ZeroVector { norm: n });
    }
    Ok(UnitVector(v.iter().map(|x| x / n).collect()))
}

pub fn angle_between(x: &UnitVector, w: &UnitVector) -> Result<Angle, SphereError> {
    let c = x.dot(w)?;
    let exact = EXACT_DOT_ULPS * f64::EPSILON;
    if c >= 1.0 - exact {
        return Ok(Angle(0.0));
    }
    if c <= -1.0 + exact {
        return Ok(Angle(PI));
    }
    Ok(clamped_acos_with_grad(c).0)
}

/// `acos` of the clamped cosine together with `d acos / dc` at the clamped
/// point. The derivative is finite and at most −1.
pub fn clamped_acos_with_grad(c: f64) -> (Angle, f64) {
    let cc = c.clamp(-1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP);
    let theta = cc.acos();
    let grad = -1.0 / (1.0 - cc * cc).sqrt();
    (Angle(theta), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_three_four_five() {
        let u = normalize(&[3.0, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15);
        assert!((u[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_unit_is_unchanged() {
        let u = normalize(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(u.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_degenerate() {
        assert!(matches!(
            normalize(&[0.0, 0.0]),
            Err(SphereError::ZeroVector { .. })
        ));
        assert!(matches!(
            normalize(&[1.0]),
            Err(SphereError::TooFewDimensions(1))
        ));
    }

    #[test]
    fn angle_special_cases() {
        let x = normalize(&[0.3, -0.2, 0.9]).unwrap();
        let neg = normalize(&[-0.3, 0.2, -0.9]).unwrap();
        assert_eq!(angle_between(&x, &x).unwrap().radians(), 0.0);
        assert_eq!(angle_between(&x, &neg).unwrap().radians(), PI);
        let a = normalize(&[1.0, 0.0]).unwrap();
        let b = normalize(&[0.0, 1.0]).unwrap();
        assert!((angle_between(&a, &b).unwrap().radians() - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn angle_dimension_mismatch() {
        let a = normalize(&[1.0, 0.0]).unwrap();
        let b = normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            angle_between(&a, &b),
            Err(SphereError::DimensionMismatch { left: 2, right: 3 })
        ));
    }

    #[test]
    fn clamped_acos_examples() {
        let (t, g) = clamped_acos_with_grad(0.0);
        assert!((t.radians() - PI / 2.0).abs() < 1e-15);
        assert!((g + 1.0).abs() < 1e-15);

        let (t, g) = clamped_acos_with_grad(1.0);
        let eps = ACOS_CLAMP;
        assert!(t.radians() > 0.0 && t.radians() < 1e-3);
        let expected = -1.0 / (2.0 * eps - eps * eps).sqrt();
        assert!(((g - expected) / expected).abs() < 1e-6);

        // acos(0.5) = π/3, −1/√0.75
        let (t, g) = clamped_acos_with_grad(0.5);
        assert!((t.radians() - 1.047_197_551_196_597_7).abs() < 1e-12);
        assert!((g + 1.154_700_538_379_251_7).abs() < 1e-12);
    }

    #[test]
    fn clamped_acos_matches_central_differences() {
        let h = 1e-6;
        for k in 0..=1998 {
            let c = -0.999 + k as f64 * 0.001;
            let (_, g) = clamped_acos_with_grad(c);
            let fd = ((c + h).acos() - (c - h).acos()) / (2.0 * h);
            assert!(((g - fd) / fd).abs() < 1e-6, "c={c} g={g} fd={fd}");
        }
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        (2usize..12).prop_flat_map(|d| prop::collection::vec(-10.0f64..10.0, d))
    }

    proptest! {
        #[test]
        fn normalize_idempotent(v in vec_strategy()) {
            prop_assume!(norm(&v) > 1e-6);
            let once = normalize(&v).unwrap();
            let twice = normalize(&once).unwrap();
            prop_assert!((norm(&once) - 1.0).abs() < 1e-6);
            for (a, b) in once.iter().zip(twice.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn angle_symmetric_and_consistent(a in vec_strategy(), seed in any::<u64>()) {
            prop_assume!(norm(&a) > 1e-6);
            let b: Vec<f64> = a.iter().enumerate()
                .map(|(i, x)| x.sin() + ((seed >> (i % 60)) & 7) as f64 - 3.5)
                .collect();
            prop_assume!(norm(&b) > 1e-6);
            let x = normalize(&a).unwrap();
            let w = normalize(&b).unwrap();
            let t1 = angle_between(&x, &w).unwrap();
            let t2 = angle_between(&w, &x).unwrap();
            prop_assert_eq!(t1, t2);
            let c = x.dot(&w).unwrap();
            prop_assert!((t1.radians().cos() - c).abs() < 1e-6);
        }
    }
}
