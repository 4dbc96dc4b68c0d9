//! Central finite differences, the independent oracle behind every gradient
//! check in the crate.

use crate::error::Result;
use crate::tensor::Scalar;

/// Numeric gradient of `eval` w.r.t. each entry of `x` by central differences
/// with step `h`. `eval` must be a pure function of the supplied vector.
pub fn grad_fd<F: Scalar>(
    mut eval: impl FnMut(&[F]) -> Result<F>,
    x: &[F],
    h: f64,
) -> Result<Vec<F>> {
    let step = F::from_f64(h);
    let two_step = F::from_f64(2.0 * h);
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = eval(&probe)?;
        probe[i] = orig - step;
        let minus = eval(&probe)?;
        probe[i] = orig;
        out.push((plus - minus) / two_step);
    }
    Ok(out)
}

/// Largest relative error between two gradient vectors,
/// `|a-n| / max(|a|, |n|, floor)` with a small floor so that exact zeros
/// compare cleanly.
pub fn max_rel_err<F: Scalar>(analytic: &[F], numeric: &[F]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let a = a.as_f64();
        let n = n.as_f64();
        let scale = a.abs().max(n.abs()).max(1e-8);
        worst = worst.max((a - n).abs() / scale);
    }
    worst
}

/// Largest deviation normalized by the gradient vector's own scale,
/// `max_i |a_i - n_i| / max(‖a‖∞, ‖n‖∞)`. The right comparison in single
/// precision, where the finite-difference noise floor is absolute.
pub fn max_err_vs_scale<F: Scalar>(analytic: &[F], numeric: &[F]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut scale = 1e-12f64;
    let mut worst_abs = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let a = a.as_f64();
        let n = n.as_f64();
        scale = scale.max(a.abs()).max(n.abs());
        worst_abs = worst_abs.max((a - n).abs());
    }
    worst_abs / scale
}

/// Per-entry check with an absolute escape: passes when the relative error is
/// below `rel_tol` or the absolute difference is below `abs_tol` (covers
/// parameters whose true gradient on a path is exactly zero).
pub fn rel_err_with_escape<F: Scalar>(analytic: F, numeric: F, abs_tol: f64) -> f64 {
    let a = analytic.as_f64();
    let n = numeric.as_f64();
    if (a - n).abs() <= abs_tol {
        return 0.0;
    }
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}
