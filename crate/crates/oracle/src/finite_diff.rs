//! Central-difference gradients and gradient comparison summaries.

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate. A non-finite function value is flagged as an error.
pub fn central_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>, String>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(theta.len());
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(format!(
                "non-finite function value at coordinate {} (f+ = {}, f- = {})",
                i, fp, fm
            ));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Elementwise comparison of an analytic gradient against a numeric one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSummary {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub n_checked: usize,
    /// Count of coordinates whose relative error exceeds the tolerance
    /// passed to [`compare_grads`].
    pub n_over_tol: usize,
}

/// Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)`.
pub fn compare_grads(analytic: &[f64], numeric: &[f64], floor: f64, tol: f64) -> GradCheckSummary {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut over = 0usize;
    for (a, n) in analytic.iter().zip(numeric) {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        if abs > max_abs {
            max_abs = abs;
        }
        if rel > max_rel {
            max_rel = rel;
        }
        if rel > tol {
            over += 1;
        }
    }
    GradCheckSummary {
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        n_checked: analytic.len(),
        n_over_tol: over,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = central_diff_grad(|_| 4.2, &[1.0, -2.0, 3.0], 1e-4).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn square_at_three() {
        let g = central_diff_grad(|x| x[0] * x[0], &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_flagged() {
        let r = central_diff_grad(|x| (-x[0]).sqrt(), &[1.0], 1e-4);
        assert!(r.is_err());
    }
}
