//! Central finite-difference gradient oracle.

use crate::error::{FlexError, Result};

/// Central-difference gradient of a scalar function at `params`.
pub fn finite_diff_gradient<F>(mut f: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + step;
        let hi = f(&work)?;
        work[i] = orig - step;
        let lo = f(&work)?;
        work[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(FlexError::Numeric(format!(
                "finite differences saw a non-finite value at coordinate {i}"
            )));
        }
        grad.push((hi - lo) / (2.0 * step));
    }
    Ok(grad)
}

/// Compare an analytic gradient against central differences of `f`.
///
/// Returns the per-parameter relative error
/// |analytic − numeric| / max(1, |analytic|, |numeric|).
pub fn finite_diff_check<F>(f: F, params: &[f64], analytic: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(FlexError::Shape(format!(
            "gradient check got {} params but {} analytic entries",
            params.len(),
            analytic.len()
        )));
    }
    let numeric = finite_diff_gradient(f, params, step)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let f = |x: &[f64]| Ok(x[0] * x[0]);
        let errs = finite_diff_check(f, &[3.0], &[6.0], 1e-5).unwrap();
        assert!(errs[0] < 1e-8, "rel err {}", errs[0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let f = |_: &[f64]| Ok(7.5);
        let g = finite_diff_gradient(f, &[1.0, -2.0, 0.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
        let errs = finite_diff_check(f, &[1.0, -2.0, 0.0], &[0.0, 0.0, 0.0], 1e-5).unwrap();
        assert!(errs.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn non_finite_function_is_rejected() {
        let f = |x: &[f64]| Ok(1.0 / (x[0] - x[0]));
        assert!(matches!(
            finite_diff_gradient(f, &[1.0], 1e-5),
            Err(FlexError::Numeric(_))
        ));
    }
}
