//! Central finite-difference gradient oracle.
//!
//! The oracle is written against a plain closure so it knows nothing about
//! [`super::Graph`]: it perturbs a flat parameter vector one coordinate at a
//! time and differences the scalar loss. Analytic gradients from the tape are
//! then compared against it with a scale-aware relative error, which is the
//! independent check every differentiable op must pass.

/// Central difference gradient of `f` at `x` with the given step:
/// `g_i ≈ (f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn central_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let hi = f(&probe);
        probe[i] = orig - step;
        let lo = f(&probe);
        probe[i] = orig;
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Scale-aware relative error: `|a − n| / max(1, |a|, |n|)`. Behaves like an
/// absolute error for small gradients and a relative one for large gradients.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Largest elementwise [`rel_err`] between analytic and numeric gradients.
/// Panics on length mismatch — that is a test-harness bug, not data.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches_closed_form() {
        // f(x) = sum(x^2) → ∇f = 2x
        let x = [0.5, -1.25, 2.0];
        let g = central_gradient(|p| p.iter().map(|v| v * v).sum(), &x, 1e-5);
        let expect = [1.0, -2.5, 4.0];
        for (a, n) in expect.iter().zip(&g) {
            assert!(rel_err(*a, *n) < 1e-9, "{a} vs {n}");
        }
    }

    #[test]
    fn rel_err_is_absolute_near_zero() {
        assert!(rel_err(0.0, 1e-9) < 1e-8);
        assert!(rel_err(100.0, 101.0) < 0.011);
    }
}
