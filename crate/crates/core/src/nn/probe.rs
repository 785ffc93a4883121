use std::f64::consts::PI;

use ndarray::array;

use crate::losses::{loss_forward_backward, LossError, MarginLossSpec};
use crate::sphere::Angle;

/// Length of the embedding step taken by [`adversarial_gradient_probe`].
pub const PROBE_STEP: f64 = 1e-4;

/// Signed change of the target angle after one descent step on the
/// embedding alone.
///
/// Two classes with antipodal centers `(1, 0)` and `(−1, 0)`; the sample
/// sits at `theta0` from class 0. The step moves the embedding a fixed
/// distance [`PROBE_STEP`] along the negative gradient. Normalizing the step
/// keeps the sign measurable when the softmax saturates at large scale and
/// the raw gradient underflows the embedding's precision. Negative means the
/// sample moved toward its own center.
pub fn adversarial_gradient_probe(spec: &MarginLossSpec, theta0: Angle) -> Result<f64, LossError> {
    let t0 = theta0.radians();
    if !(t0 > 0.0 && t0 < PI) {
        return Err(LossError::InvalidSpec(format!(
            "probe angle must lie strictly inside (0, π), got {t0}"
        )));
    }
    let w = array![[1.0, -1.0], [0.0, 0.0]];
    let x = array![[t0.cos(), t0.sin()]];
    let out = loss_forward_backward(spec, x.view(), w.view(), &[0])?;
    let g = out.grad_x.row(0);
    let norm = g.dot(&g).sqrt();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let moved = [x[[0, 0]] - PROBE_STEP * g[0] / norm, x[[0, 1]] - PROBE_STEP * g[1] / norm];
    Ok(moved[1].atan2(moved[0]).abs() - t0)
}
