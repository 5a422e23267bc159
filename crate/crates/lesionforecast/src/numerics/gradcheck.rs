//! Central finite-difference helpers used by the gradient test suites.

use super::Real;

/// Numerically differentiates `f` at `x` with central differences.
pub fn central_diff(mut f: impl FnMut(&[Real]) -> Real, x: &[Real], h: Real) -> Vec<Real> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Relative error with a small absolute floor so that near-zero pairs
/// do not blow up the ratio.
pub fn rel_err(a: Real, b: Real) -> Real {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest componentwise relative error between two gradient vectors.
pub fn max_rel_err(analytic: &[Real], numeric: &[Real]) -> Real {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, Real::max)
}
