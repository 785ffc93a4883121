//! Target-logit curves and binary decision-margin maps.

use std::f64::consts::PI;
use std::fmt::Write as _;

use super::{margin_logits, LossError, MarginLossSpec};
use crate::format::sig9;
use crate::sphere::Angle;

/// `k`-th point of an `n`-point uniform grid on `[0, π]`, with exact endpoints.
pub(crate) fn grid_angle(k: usize, n: usize) -> Angle {
    let t = if k + 1 == n {
        PI
    } else {
        PI * k as f64 / (n - 1) as f64
    };
    Angle::new(t).expect("grid angle within [0, π]")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub theta: f64,
    pub target_logit: f64,
}

/// Target-role logits on a uniform `n_points` grid over `[0, π]`.
pub fn logit_curve_table(spec: &MarginLossSpec, n_points: usize) -> Result<Vec<CurveRow>, LossError> {
    if n_points < 2 {
        return Err(LossError::InvalidSpec(format!(
            "a curve needs at least 2 points, got {n_points}"
        )));
    }
    spec.validate()?;
    (0..n_points)
        .map(|k| {
            let theta = grid_angle(k, n_points);
            Ok(CurveRow {
                theta: theta.radians(),
                target_logit: margin_logits(spec, theta, true)?,
            })
        })
        .collect()
}

pub fn curve_to_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("theta,target_logit\n");
    for r in rows {
        let _ = writeln!(out, "{},{}", sig9(r.theta), sig9(r.target_logit));
    }
    out
}

/// Overlap of the two class margin regions on a `grid_n × grid_n` grid.
///
/// Cell `(θ1, θ2)` is in class 1's region when `target(θ1) > nontarget(θ2)`
/// and in class 2's region when `target(θ2) > nontarget(θ1)`.
#[derive(Debug, Clone)]
pub struct OverlapMap {
    pub grid_n: usize,
    pub overlap_fraction: f64,
    thetas: Vec<f64>,
    mask: Vec<bool>,
}

impl OverlapMap {
    pub fn theta(&self, k: usize) -> f64 {
        self.thetas[k]
    }

    pub fn in_overlap(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.grid_n + j]
    }

    pub fn overlap_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// `(θ1, θ2)` for every overlapping cell, row-major.
    pub fn overlap_cells(&self) -> Vec<(f64, f64)> {
        let n = self.grid_n;
        (0..n * n)
            .filter(|&k| self.mask[k])
            .map(|k| (self.thetas[k / n], self.thetas[k % n]))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let n = self.grid_n;
        let mut out = String::with_capacity(n * n * 24 + 32);
        out.push_str("theta1,theta2,in_overlap\n");
        let labels: Vec<String> = self.thetas.iter().map(|&t| sig9(t)).collect();
        for i in 0..n {
            for j in 0..n {
                let _ = writeln!(
                    out,
                    "{},{},{}",
                    labels[i],
                    labels[j],
                    u8::from(self.mask[i * n + j])
                );
            }
        }
        out
    }
}

pub fn overlap_map(spec: &MarginLossSpec, grid_n: usize) -> Result<OverlapMap, LossError> {
    if grid_n < 2 {
        return Err(LossError::InvalidSpec(format!(
            "overlap grid needs at least 2 points per axis, got {grid_n}"
        )));
    }
    spec.validate()?;
    let mut thetas = Vec::with_capacity(grid_n);
    let mut target = Vec::with_capacity(grid_n);
    let mut other = Vec::with_capacity(grid_n);
    for k in 0..grid_n {
        let a = grid_angle(k, grid_n);
        thetas.push(a.radians());
        target.push(margin_logits(spec, a, true)?);
        other.push(margin_logits(spec, a, false)?);
    }
    let mut mask = vec![false; grid_n * grid_n];
    let mut count = 0usize;
    for i in 0..grid_n {
        for j in 0..grid_n {
            let class1 = target[i] > other[j];
            let class2 = target[j] > other[i];
            if class1 && class2 {
                mask[i * grid_n + j] = true;
                count += 1;
            }
        }
    }
    Ok(OverlapMap {
        grid_n,
        overlap_fraction: count as f64 / (grid_n * grid_n) as f64,
        thetas,
        mask,
    })
}
