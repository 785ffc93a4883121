//! Finite-difference oracles for unit tests.

use ndarray::{Array, Array2, Dimension};

use crate::rng::SplitMix64;

pub fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gaussian())
}

pub fn random_array<D: Dimension>(rng: &mut SplitMix64, shape: D) -> Array<f64, D> {
    Array::from_shape_fn(shape, |_| rng.gaussian())
}

/// Central differences of `f` with respect to every entry of `at`.
pub fn central_diff<D, F>(at: &Array<f64, D>, h: f64, f: F) -> Array<f64, D>
where
    D: Dimension,
    F: Fn(&Array<f64, D>) -> f64,
{
    let mut probe = at.clone();
    let mut out = Array::zeros(at.raw_dim());
    for (k, g) in out.iter_mut().enumerate() {
        let orig = at.as_slice_memory_order().unwrap()[k];
        probe.as_slice_memory_order_mut().unwrap()[k] = orig + h;
        let up = f(&probe);
        probe.as_slice_memory_order_mut().unwrap()[k] = orig - h;
        let down = f(&probe);
        probe.as_slice_memory_order_mut().unwrap()[k] = orig;
        *g = (up - down) / (2.0 * h);
    }
    out
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over paired entries, with the
/// floor at 1e-3 of the largest magnitude in either array.
pub fn max_rel_error<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
