//! Closed-form folds of the EMA and alignment recurrences.

/// Fold `v <- (1 - rate) v + rate * target` over a target sequence.
pub fn ema_closed_form(x0: f64, targets: &[f64], rate: f64) -> f64 {
    assert!((0.0..=1.0).contains(&rate), "rate must lie in [0, 1]");
    let mut v = x0;
    for t in targets {
        v = (1.0 - rate) * v + rate * t;
    }
    v
}

/// Vector-valued EMA fold over a recorded trajectory.
pub fn ema_fold_vec(x0: &[f64], trajectory: &[Vec<f64>], rate: f64) -> Vec<f64> {
    let mut v = x0.to_vec();
    for step in trajectory {
        assert_eq!(step.len(), v.len(), "trajectory width changed");
        for (vi, ti) in v.iter_mut().zip(step) {
            *vi = (1.0 - rate) * *vi + rate * ti;
        }
    }
    v
}

/// One recorded batch statistic for a single channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatBatch {
    pub mu_b: f64,
    pub sigma_b: f64,
    /// Whether an alignment step followed this EMA update.
    pub aligned: bool,
}

/// Replay the per-channel target-statistics pipeline: EMA in the mean and
/// variance domains, deviation floored at `sigma_floor`, then an optional
/// alignment step contracting toward the source statistics.
#[allow(clippy::too_many_arguments)]
pub fn target_stats_fold(
    mu0: f64,
    sigma0: f64,
    mu_s: f64,
    sigma_s: f64,
    nu_b: f64,
    eta_t: f64,
    sigma_floor: f64,
    batches: &[StatBatch],
) -> (f64, f64) {
    let mut mu = mu0;
    let mut sigma = sigma0;
    for b in batches {
        mu = (1.0 - nu_b) * mu + nu_b * b.mu_b;
        let var = (1.0 - nu_b) * (sigma * sigma) + nu_b * (b.sigma_b * b.sigma_b);
        sigma = var.sqrt().max(sigma_floor);
        if b.aligned {
            mu -= 2.0 * eta_t * (mu - mu_s);
            sigma = (sigma - 2.0 * eta_t * (sigma - sigma_s)).max(sigma_floor);
        }
    }
    (mu, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_keeps_initial_value() {
        assert_eq!(ema_closed_form(1.5, &[10.0, -3.0, 7.0], 0.0), 1.5);
    }

    #[test]
    fn constant_target_converges_geometrically() {
        let targets = vec![2.0; 500];
        let v = ema_closed_form(0.0, &targets, 0.05);
        let expected_gap = 2.0 * 0.95f64.powi(500);
        assert!((2.0 - v - expected_gap).abs() < 1e-12);
    }
}
