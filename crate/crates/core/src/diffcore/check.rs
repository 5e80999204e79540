//! Finite-difference oracles.

use super::DiffError;

/// Central differences of `f` at `point` with step `eps`.
pub fn central_difference<F>(mut f: F, point: &[f64], eps: f64) -> Result<Vec<f64>, DiffError>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(&x);
        x[i] = orig - eps;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(DiffError::NonFiniteFunction { index: i });
        }
        out.push((fp - fm) / (2.0 * eps));
    }
    Ok(out)
}

/// Max over coordinates of `|analytic - fd| / (|analytic| + eps)`.
pub fn finite_difference_check<F>(f: F, analytic: &[f64], point: &[f64], eps: f64) -> Result<f64, DiffError>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    if analytic.len() != point.len() {
        return Err(DiffError::ShapeMismatch {
            tag: "fd_check",
            detail: format!("{} gradient entries for {} coordinates", analytic.len(), point.len()),
        });
    }
    let fd = central_difference(f, point, eps)?;
    Ok(relative_error(analytic, &fd, eps))
}

/// `max_i |a_i - b_i| / (|a_i| + floor)`.
pub fn relative_error(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / (a.abs() + floor))
        .fold(0.0, f64::max)
}
