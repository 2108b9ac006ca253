use crate::{error::config, Error, Result};

/// Central-difference gradient check.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// over all coordinates, where `numeric = (f(p + ε) - f(p - ε)) / 2ε`.
pub fn grad_check<F>(mut f: F, params: &[f64], analytic: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(config("grad_check epsilon must lie in [1e-7, 1e-3]"));
    }
    if params.len() != analytic.len() {
        return Err(Error::Shape {
            op: "grad_check",
            left: (params.len(), 1),
            right: (analytic.len(), 1),
        });
    }
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let plus = f(&x);
        x[i] = orig - epsilon;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { coord: i });
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = libm::fabs(a - numeric) / 1f64.max(libm::fabs(a)).max(libm::fabs(numeric));
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn square_at_three() {
        let err = grad_check(|p| p[0] * p[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn sum_of_squares() {
        let p: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();
        let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let err = grad_check(|x| x.iter().map(|v| v * v).sum(), &p, &g, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = grad_check(|p| p[0] * p[0], &[3.0], &[5.0], 1e-5).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn non_finite_objective_names_coordinate() {
        let f = |p: &[f64]| if p[1] > 1.0 { f64::NAN } else { p[0] + p[1] };
        assert_eq!(
            grad_check(f, &[0.0, 1.0], &[1.0, 1.0], 1e-4),
            Err(Error::NonFinite { coord: 1 })
        );
    }

    #[test]
    fn epsilon_out_of_range() {
        assert!(matches!(
            grad_check(|p| p[0], &[0.0], &[1.0], 1e-2),
            Err(Error::Config(_))
        ));
    }
}
