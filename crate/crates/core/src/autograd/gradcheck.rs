//! Finite-difference gradient verification. The numerical side never touches
//! the backward pass: it only re-evaluates a forward closure, so it stays an
//! independent oracle for whatever the tape computes analytically.

/// Central difference `(f(x+h) - f(x-h)) / 2h` for every coordinate of `x`.
/// `f` must be a pure function of its argument.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe);
        probe[i] = x[i] - step;
        let minus = f(&probe);
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Relative error with an absolute floor, so near-zero gradient pairs do not
/// blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Largest relative error between an analytic gradient and the central
/// difference of `f` at `x`.
pub fn max_relative_error(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    step: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let numeric = central_diff(f, x, step);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}
