//! Central-difference gradient verification. Every analytic backward pass in
//! this crate is required to agree with this oracle in 64-bit before it may
//! be trusted in training.

use crate::tensor::Tensor;

/// Perturbation used across the whole suite; with 64-bit scalars the
/// truncation error of the central difference sits near 1e-10, far below the
/// acceptance threshold.
pub const GRADCHECK_EPS: f64 = 1e-5;

/// Maximum tolerated relative error between analytic and numeric gradients.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// rel(a, n) = |a - n| / max(|a|, |n|, 1e-8)
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Numeric gradient of `f` at `x` via symmetric perturbation of every
/// coordinate: (f(x+e) - f(x-e)) / 2e.
pub fn numeric_grad(
    x: &Tensor<f64>,
    eps: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    g
}

/// Worst-coordinate relative error between `analytic` and the numeric
/// gradient of `f` at `x`.
pub fn check_grad(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eps: f64,
    f: impl FnMut(&Tensor<f64>) -> f64,
) -> f64 {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape must match input");
    let numeric = numeric_grad(x, eps, f);
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let e = relative_error(analytic.data()[i], numeric.data()[i]);
        if e > worst {
            worst = e;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_has_linear_gradient() {
        // f(x) = sum x_i^2 has gradient 2x; the oracle must recover it.
        let x = Tensor::new(&[4], vec![0.5, -1.25, 2.0, 0.0]).unwrap();
        let g = numeric_grad(&x, 1e-5, |t| t.data().iter().map(|v| v * v).sum());
        for i in 0..4 {
            let want = 2.0 * x.data()[i];
            assert!(relative_error(want, g.data()[i]) < 1e-8, "coord {}", i);
        }
    }

    #[test]
    fn relative_error_guards_small_denominators() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        // both magnitudes below the guard: error is measured against 1e-8
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-10);
    }
}
