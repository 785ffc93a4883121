//! Embedding-level distillation: pull student embeddings toward a fixed
//! teacher's.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{normalize_rows, project_rows, LossError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("student is {student:?} but teacher is {teacher:?}")]
    DimensionMismatch {
        student: (usize, usize),
        teacher: (usize, usize),
    },
    #[error("zero-norm {what} row {index}")]
    ZeroVector { what: &'static str, index: usize },
    #[error("distillation weight must be ≥ 0, got {0}")]
    NegativeWeight(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillMode {
    /// `mean(1 − cos(student, teacher))`.
    CosineGap,
    /// `mean(‖student − teacher‖² / d)`.
    SquaredL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSpec {
    pub mode: DistillMode,
    /// Blend coefficient against the classification loss.
    pub weight: f64,
}

impl DistillSpec {
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.weight >= 0.0 && self.weight.is_finite() {
            Ok(())
        } else {
            Err(DistillError::NegativeWeight(self.weight))
        }
    }
}

fn zero_row(err: LossError, what: &'static str) -> DistillError {
    match err {
        LossError::ZeroVector { index, .. } => DistillError::ZeroVector { what, index },
        other => unreachable!("row normalization only fails on zero rows: {other}"),
    }
}

/// Unweighted distillation loss and its gradient w.r.t. the student rows.
/// The teacher is a constant.
pub fn distill_loss_grad(
    spec: &DistillSpec,
    student: ArrayView2<f64>,
    teacher: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>), DistillError> {
    spec.validate()?;
    if student.dim() != teacher.dim() || student.nrows() == 0 {
        return Err(DistillError::DimensionMismatch {
            student: student.dim(),
            teacher: teacher.dim(),
        });
    }
    let (n, d) = student.dim();
    let inv_n = 1.0 / n as f64;
    match spec.mode {
        DistillMode::CosineGap => {
            let (su, s_norms) = normalize_rows(student, "student").map_err(|e| zero_row(e, "student"))?;
            let (tu, _) = normalize_rows(teacher, "teacher").map_err(|e| zero_row(e, "teacher"))?;
            let cos = (&su * &tu).sum_axis(Axis(1));
            let loss = cos.iter().map(|c| 1.0 - c).sum::<f64>() * inv_n;
            let mut grad = tu.mapv(|v| -v * inv_n);
            project_rows(&mut grad, &su, &s_norms);
            Ok((loss, grad))
        }
        DistillMode::SquaredL2 => {
            let diff = &student - &teacher;
            let loss = diff.iter().map(|v| v * v).sum::<f64>() * inv_n / d as f64;
            let grad = diff.mapv(|v| 2.0 * v * inv_n / d as f64);
            Ok((loss, grad))
        }
    }
}
