//! Numerical gradient checking via central differences.
//!
//! The estimator only calls a user-supplied forward evaluation, so it shares
//! no code with the reverse sweep it is used to validate.

use crate::error::Result;

/// Default step for central differences on f64 graphs.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Coordinates below this magnitude in both the analytic and numeric gradient
/// are compared absolutely instead of relatively.
pub const TINY: f64 = 1e-10;

/// Central-difference estimate of d(eval)/d(x[i]) for each requested
/// coordinate. `eval` must be a pure function of the slice it is handed.
pub fn numeric_grad_at(
    mut eval: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    coords: &[usize],
    eps: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = eval(&probe)?;
        probe[i] = orig - eps;
        let down = eval(&probe)?;
        probe[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// Central-difference estimate over every coordinate of `x`.
pub fn numeric_grad(
    eval: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    let coords: Vec<usize> = (0..x.len()).collect();
    numeric_grad_at(eval, x, &coords, eps)
}

/// Relative error between an analytic and a numeric derivative, scaled by
/// the larger magnitude. Zero when both are below [`TINY`].
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < TINY {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Largest relative error across paired coordinates.
///
/// # Panics
/// Panics if the slices have different lengths.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
