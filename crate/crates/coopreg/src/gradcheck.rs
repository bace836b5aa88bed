//! Finite-difference utilities for verifying analytic gradients in tests.

use ndarray::ArrayD;

/// Central-difference gradient of a scalar function at `x`, perturbing every
/// element by `step`.
pub fn central_diff(f: &mut impl FnMut(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, step: f64) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    let flat_len = x.len();
    for i in 0..flat_len {
        let orig = probe.as_slice_mut().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + step;
        let plus = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - step;
        let minus = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Worst-case relative error between gradient vectors, normalized by the
/// larger of the two infinity norms.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = analytic
        .iter()
        .chain(numeric.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-10);
    analytic
        .iter()
        .zip(numeric.iter())
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / norm
}
