//! Finite-difference gradient oracles for testing the autodiff engine.

use alloc::vec::Vec;

use crate::graph::DiffError;

/// Central-difference gradient estimate of `f` at `params`.
///
/// `f` receives the flattened parameter vector (see `ParamSet::flatten`) and
/// must be deterministic; each coordinate is probed with `(f(p + h·eᵢ) −
/// f(p − h·eᵢ)) / 2h`. A non-finite probe value is an error.
pub fn finite_diff_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    h: f64,
) -> Result<Vec<f64>, DiffError> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(DiffError::NonFiniteProbe);
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative error between two gradient vectors:
/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, floor)`.
///
/// Measured at the vector level so that individual near-zero coordinates
/// (where any relative measure degenerates) do not mask agreement of the
/// gradient as a whole.
pub fn rel_err_inf(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch: {} vs {}", a.len(), b.len());
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, &x| if x.abs() > m { x.abs() } else { m });
    let diff: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let denom = inf(a).max(inf(b)).max(1e-12);
    inf(&diff) / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic_slope() {
        let g = finite_diff_gradient(|p| p[0] * p[0], &[3.0], 1e-5).expect("finite probes");
        assert!((g[0] - 6.0).abs() < 1e-8, "expected ~6, got {}", g[0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_gradient(|_| 4.25, &[1.0, -2.0, 0.5], 1e-5).expect("finite probes");
        assert_eq!(g, alloc::vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        // ln(x) probed at x = 0 evaluates ln(-h), which is NaN.
        let r = finite_diff_gradient(|p| crate::fmath::ln(p[0]), &[0.0], 1e-5);
        assert!(matches!(r, Err(DiffError::NonFiniteProbe)));
    }
}
