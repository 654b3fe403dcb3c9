//! Resilient batch normalization state: per-channel source and target Gaussian
//! statistics, EMA updates from test-batch statistics, and soft alignment of the
//! target statistics toward the source statistics by gradient steps on the
//! squared 2-Wasserstein distance between the per-channel Gaussians.
//!
//! Statistics are kept in `f64`; the affine parameters `gamma`/`beta` are `f32`
//! like every other trainable parameter.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Floor applied to the target standard deviation after every update.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Default stability constant in the normalization denominator.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel normalization state for one layer.
///
/// `mu_s`/`sigma_s` are the statistics accumulated during source training and
/// are never changed at test time. `mu_t`/`sigma_t` are the online target
/// statistics, updated only through [`ema_update`] and [`align_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub mu_s: Vec<f64>,
    pub sigma_s: Vec<f64>,
    pub mu_t: Vec<f64>,
    pub sigma_t: Vec<f64>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub nu_b: f64,
    pub eta_t: f64,
    pub eps: f64,
}

impl NormState {
    /// Identity state: zero means, unit deviations, `gamma = 1`, `beta = 0`.
    pub fn identity(channels: usize, nu_b: f64, eta_t: f64) -> Result<Self> {
        let state = NormState {
            mu_s: vec![0.0; channels],
            sigma_s: vec![1.0; channels],
            mu_t: vec![0.0; channels],
            sigma_t: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            nu_b,
            eta_t,
            eps: DEFAULT_EPS,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn channels(&self) -> usize {
        self.mu_s.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.mu_s.len();
        if c == 0 {
            return Err(CoreError::EmptyInput("normalization state with 0 channels".into()));
        }
        for (name, len) in [
            ("sigma_s", self.sigma_s.len()),
            ("mu_t", self.mu_t.len()),
            ("sigma_t", self.sigma_t.len()),
            ("gamma", self.gamma.len()),
            ("beta", self.beta.len()),
        ] {
            if len != c {
                return Err(CoreError::LengthMismatch {
                    context: format!("NormState.{}", name),
                    left: c,
                    right: len,
                });
            }
        }
        if !(0.0..=1.0).contains(&self.nu_b) {
            return Err(CoreError::InvalidConfig(format!(
                "nu_b must lie in [0, 1], got {}",
                self.nu_b
            )));
        }
        // The alignment update contracts the statistics gap by (1 - 2 eta_t);
        // a rate of 0.5 or above overshoots or oscillates.
        if !(0.0..0.5).contains(&self.eta_t) {
            return Err(CoreError::InvalidConfig(format!(
                "eta_t must lie in [0, 0.5), got {}",
                self.eta_t
            )));
        }
        if self.sigma_s.iter().any(|s| *s <= 0.0) || self.sigma_t.iter().any(|s| *s <= 0.0) {
            return Err(CoreError::InvalidConfig(
                "standard deviations must be strictly positive".into(),
            ));
        }
        Ok(())
    }

    /// Reset the target statistics to the source statistics (test-start state).
    pub fn reset_target_to_source(&mut self) {
        self.mu_t.clone_from(&self.mu_s);
        self.sigma_t.clone_from(&self.sigma_s);
    }
}

/// Per-channel mean and standard deviation of one test batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mu_b: Vec<f64>,
    pub sigma_b: Vec<f64>,
}

impl BatchStats {
    pub fn channels(&self) -> usize {
        self.mu_b.len()
    }
}

/// Per-channel mean and biased (divide-by-`B*H*W`) variance across the batch
/// and spatial axes, accumulated in `f64`.
pub fn compute_batch_stats(x: &Tensor) -> Result<BatchStats> {
    let (b, c, h, w) = x.dims4()?;
    let n = b * h * w;
    if n == 0 || c == 0 {
        return Err(CoreError::EmptyInput("batch statistics of an empty tensor".into()));
    }
    let mut mean = vec![0.0f64; c];
    let data = x.data();
    let plane = h * w;
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let mut acc = 0.0f64;
            for v in &data[base..base + plane] {
                acc += *v as f64;
            }
            mean[ci] += acc;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0f64; c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let mu = mean[ci];
            let mut acc = 0.0f64;
            for v in &data[base..base + plane] {
                let d = *v as f64 - mu;
                acc += d * d;
            }
            var[ci] += acc;
        }
    }
    let sigma: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
    if mean.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite("batch statistics".into()));
    }
    Ok(BatchStats {
        mu_b: mean,
        sigma_b: sigma,
    })
}

/// Blend the target statistics toward the batch statistics:
/// mean in the mean domain, deviation in the variance domain.
pub fn ema_update(state: &mut NormState, bs: &BatchStats) -> Result<()> {
    let c = state.channels();
    if bs.channels() != c {
        return Err(CoreError::LengthMismatch {
            context: "ema_update channel count".into(),
            left: c,
            right: bs.channels(),
        });
    }
    let nu = state.nu_b;
    for i in 0..c {
        state.mu_t[i] = (1.0 - nu) * state.mu_t[i] + nu * bs.mu_b[i];
        let var_t = state.sigma_t[i] * state.sigma_t[i];
        let var_b = bs.sigma_b[i] * bs.sigma_b[i];
        let blended = (1.0 - nu) * var_t + nu * var_b;
        state.sigma_t[i] = blended.sqrt().max(SIGMA_FLOOR);
    }
    Ok(())
}

/// One soft-alignment step pulling the target statistics toward the source:
/// `mu_t -= 2 eta_t (mu_t - mu_s)` and `sigma_t -= 2 eta_t (sigma_t - sigma_s)`.
///
/// The deviation gradient is taken with respect to `sigma_t` itself; the
/// variance-domain form puts `sigma_t` in a denominator and blows up for
/// small deviations (see [`divergence_grad_diagnostics`]).
pub fn align_step(state: &mut NormState) {
    let eta = state.eta_t;
    for i in 0..state.mu_t.len() {
        state.mu_t[i] -= 2.0 * eta * (state.mu_t[i] - state.mu_s[i]);
        let s = state.sigma_t[i] - 2.0 * eta * (state.sigma_t[i] - state.sigma_s[i]);
        state.sigma_t[i] = s.max(SIGMA_FLOOR);
    }
}

/// Squared 2-Wasserstein distance between the per-channel target and source
/// Gaussians: `(mu_s - mu_t)^2 + sigma_s^2 + sigma_t^2 - 2 sigma_s sigma_t`,
/// computed in the algebraically equal difference form so it is exactly
/// nonnegative.
pub fn wasserstein_sq(state: &NormState) -> Vec<f64> {
    state
        .mu_s
        .iter()
        .zip(&state.mu_t)
        .zip(state.sigma_s.iter().zip(&state.sigma_t))
        .map(|((ms, mt), (ss, st))| {
            let dm = ms - mt;
            let ds = ss - st;
            dm * dm + ds * ds
        })
        .collect()
}

/// Gradient magnitudes of the candidate alignment objectives with respect to
/// the target statistics, for one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceGrads {
    /// d W^2 / d mu_t = 2 (mu_t - mu_s)
    pub w2_grad_mu: f64,
    /// d W^2 / d sigma_t = 2 sigma_t - 2 sigma_s
    pub w2_grad_sigma: f64,
    /// d KL / d sigma_t = (sigma_t^2 - sigma_s^2) / (sigma_t sigma_s^2)
    pub kl_grad_sigma: f64,
    /// d JS / d sigma_t = sigma_t / (2 sigma_s^2) - sigma_s^2 / (2 sigma_t^3)
    ///                    + (mu_t - mu_s)^2 / (2 sigma_t^3)
    pub js_grad_sigma: f64,
}

/// Evaluate the alignment gradients per channel. The Wasserstein deviation
/// gradient stays bounded by `2 sigma_s` for `sigma_t <= sigma_s`, while the
/// KL and JS deviation gradients diverge as `sigma_t -> 0`; this is the
/// diagnostic that motivates the Wasserstein objective.
pub fn divergence_grad_diagnostics(state: &NormState) -> Vec<DivergenceGrads> {
    let c = state.channels();
    let mut out = Vec::with_capacity(c);
    for i in 0..c {
        let (ms, mt) = (state.mu_s[i], state.mu_t[i]);
        let (ss, st) = (state.sigma_s[i], state.sigma_t[i]);
        let dm = mt - ms;
        out.push(DivergenceGrads {
            w2_grad_mu: 2.0 * dm,
            w2_grad_sigma: 2.0 * st - 2.0 * ss,
            kl_grad_sigma: (st * st - ss * ss) / (st * ss * ss),
            js_grad_sigma: st / (2.0 * ss * ss) - ss * ss / (2.0 * st * st * st)
                + dm * dm / (2.0 * st * st * st),
        });
    }
    out
}

/// Which statistics the normalization uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsChoice {
    Batch,
    Target,
    Source,
}

/// Channel-wise normalization `gamma (x - mu) / sqrt(sigma^2 + eps) + beta`
/// with the chosen statistics. `Batch` statistics are computed from `x`.
pub fn normalize(x: &Tensor, choice: StatsChoice, state: &NormState) -> Result<Tensor> {
    match choice {
        StatsChoice::Batch => {
            let bs = compute_batch_stats(x)?;
            normalize_with(x, &bs.mu_b, &bs.sigma_b, &state.gamma, &state.beta, state.eps)
        }
        StatsChoice::Target => normalize_with(
            x,
            &state.mu_t,
            &state.sigma_t,
            &state.gamma,
            &state.beta,
            state.eps,
        ),
        StatsChoice::Source => normalize_with(
            x,
            &state.mu_s,
            &state.sigma_s,
            &state.gamma,
            &state.beta,
            state.eps,
        ),
    }
}

/// Shared normalization kernel; the network's normalization layers call this
/// same routine so layer output and standalone output agree bit for bit.
pub fn normalize_with(
    x: &Tensor,
    mu: &[f64],
    sigma: &[f64],
    gamma: &[f32],
    beta: &[f32],
    eps: f64,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if mu.len() != c {
        return Err(CoreError::LengthMismatch {
            context: "normalize channel count".into(),
            left: c,
            right: mu.len(),
        });
    }
    let plane = h * w;
    let mut out = vec![0.0f32; x.len()];
    for ci in 0..c {
        let inv = 1.0 / (sigma[ci] * sigma[ci] + eps).sqrt();
        let g = gamma[ci] as f64;
        let be = beta[ci] as f64;
        let m = mu[ci];
        for bi in 0..b {
            let base = (bi * c + ci) * plane;
            for k in 0..plane {
                // Same association as the network's normalization layer so
                // both paths agree bit for bit.
                let xh = (x.data()[base + k] as f64 - m) * inv;
                out[base + k] = (g * xh + be) as f32;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state2(mu_s: [f64; 2], sigma_s: [f64; 2], mu_t: [f64; 2], sigma_t: [f64; 2]) -> NormState {
        NormState {
            mu_s: mu_s.to_vec(),
            sigma_s: sigma_s.to_vec(),
            mu_t: mu_t.to_vec(),
            sigma_t: sigma_t.to_vec(),
            gamma: vec![1.0; 2],
            beta: vec![0.0; 2],
            nu_b: 0.05,
            eta_t: 0.01,
            eps: DEFAULT_EPS,
        }
    }

    #[test]
    fn batch_stats_constant_tensor() {
        let x = Tensor::filled(vec![4, 2, 3, 3], 2.5);
        let bs = compute_batch_stats(&x).unwrap();
        assert_eq!(bs.mu_b, vec![2.5, 2.5]);
        assert_eq!(bs.sigma_b, vec![0.0, 0.0]);
    }

    #[test]
    fn batch_stats_plus_minus_one() {
        let x = Tensor::new(vec![2, 1, 1, 1], vec![-1.0, 1.0]).unwrap();
        let bs = compute_batch_stats(&x).unwrap();
        assert_eq!(bs.mu_b[0], 0.0);
        assert_eq!(bs.sigma_b[0], 1.0);
    }

    #[test]
    fn batch_stats_rejects_empty() {
        let x = Tensor::zeros(vec![0, 2, 1, 1]);
        assert!(compute_batch_stats(&x).is_err());
    }

    #[test]
    fn ema_boundary_rates() {
        let bs = BatchStats {
            mu_b: vec![1.0, -2.0],
            sigma_b: vec![2.0, 0.5],
        };
        let mut frozen = state2([0.0; 2], [1.0; 2], [0.0; 2], [1.0; 2]);
        frozen.nu_b = 0.0;
        let before = frozen.clone();
        ema_update(&mut frozen, &bs).unwrap();
        assert_eq!(frozen, before);

        let mut full = state2([0.0; 2], [1.0; 2], [0.0; 2], [1.0; 2]);
        full.nu_b = 1.0;
        ema_update(&mut full, &bs).unwrap();
        assert_eq!(full.mu_t, bs.mu_b);
        assert!((full.sigma_t[0] - 2.0).abs() < 1e-12);
        assert!((full.sigma_t[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ema_default_rate_moves_mean_by_nu() {
        // mu_t = 0, mu_b = 1, nu_b = 0.05 -> mu_t' = 0.05
        let mut s = state2([0.0; 2], [1.0; 2], [0.0; 2], [1.0; 2]);
        let bs = BatchStats {
            mu_b: vec![1.0, 1.0],
            sigma_b: vec![1.0, 1.0],
        };
        ema_update(&mut s, &bs).unwrap();
        assert!((s.mu_t[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn wasserstein_hand_values() {
        // identical Gaussians -> 0
        let s = state2([0.3, -1.0], [0.7, 2.0], [0.3, -1.0], [0.7, 2.0]);
        assert_eq!(wasserstein_sq(&s), vec![0.0, 0.0]);
        // unit deviations, unit mean gap -> 1
        let s = state2([0.0; 2], [1.0; 2], [1.0; 2], [1.0; 2]);
        assert_eq!(wasserstein_sq(&s), vec![1.0, 1.0]);
        // mu_s=0, mu_t=2, sigma_s=1, sigma_t=3 -> 4 + 1 + 9 - 6 = 8
        let s = state2([0.0; 2], [1.0; 2], [2.0; 2], [3.0; 2]);
        assert!((wasserstein_sq(&s)[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn align_fixed_point_and_single_step() {
        let mut fixed = state2([0.5, -0.5], [1.5, 0.9], [0.5, -0.5], [1.5, 0.9]);
        let before = fixed.clone();
        align_step(&mut fixed);
        assert_eq!(fixed, before);

        // mu_s=0, mu_t=1, eta_t=0.01 -> mu_t' = 0.98
        let mut s = state2([0.0; 2], [1.0; 2], [1.0; 2], [1.0; 2]);
        align_step(&mut s);
        assert!((s.mu_t[0] - 0.98).abs() < 1e-15);
    }

    #[test]
    fn align_geometric_decay_to_source() {
        let mut s = state2([0.0, 1.0], [1.0, 2.0], [4.0, -3.0], [0.25, 5.0]);
        s.eta_t = 0.05;
        let ratio = 1.0 - 2.0 * s.eta_t;
        let mut expected_gap_mu = s.mu_t[0] - s.mu_s[0];
        let mut expected_gap_sigma = s.sigma_t[1] - s.sigma_s[1];
        for _ in 0..200 {
            align_step(&mut s);
            expected_gap_mu *= ratio;
            expected_gap_sigma *= ratio;
            assert!((s.mu_t[0] - s.mu_s[0] - expected_gap_mu).abs() < 1e-9);
            assert!((s.sigma_t[1] - s.sigma_s[1] - expected_gap_sigma).abs() < 1e-9);
        }
        assert!((s.mu_t[0] - s.mu_s[0]).abs() < 1e-8);
        assert!((s.sigma_t[1] - s.sigma_s[1]).abs() < 1e-7);
    }

    #[test]
    fn divergence_grads_at_fixed_point_are_zero() {
        let s = state2([0.1, 0.1], [0.8, 0.8], [0.1, 0.1], [0.8, 0.8]);
        for g in divergence_grad_diagnostics(&s) {
            assert_eq!(g.w2_grad_mu, 0.0);
            assert_eq!(g.w2_grad_sigma, 0.0);
            assert_eq!(g.kl_grad_sigma, 0.0);
            assert_eq!(g.js_grad_sigma, 0.0);
        }
    }

    #[test]
    fn divergence_grads_blow_up_for_small_sigma_t() {
        // sigma_s = 1, mu gap 0, sigma_t = 1e-3: |w2| ~ 2, |kl| ~ 1e3, |js| ~ 5e8
        let s = state2([0.0; 2], [1.0; 2], [0.0; 2], [1e-3, 1e-3]);
        let g = divergence_grad_diagnostics(&s)[0];
        assert!((g.w2_grad_sigma.abs() - 2.0 * (1.0 - 1e-3)).abs() < 1e-12);
        assert!((g.kl_grad_sigma.abs() - 999.999).abs() < 1e-3);
        assert!((g.js_grad_sigma.abs() - 5e8).abs() / 5e8 < 1e-3);
        assert!(g.kl_grad_sigma.abs() / g.w2_grad_sigma.abs() > 100.0);
        assert!(g.js_grad_sigma.abs() / g.w2_grad_sigma.abs() > 1e4);
    }

    #[test]
    fn kl_sigma_grad_hand_value() {
        // sigma_s = 1, sigma_t = 2, mu gap 0 -> (4 - 1) / (2 * 1) = 3/2
        let s = state2([0.0; 2], [1.0; 2], [0.0; 2], [2.0; 2]);
        let g = divergence_grad_diagnostics(&s)[0];
        assert!((g.kl_grad_sigma - 1.5).abs() < 1e-15);
    }

    #[test]
    fn normalize_identity_affine() {
        // gamma=1, beta=0, x = mu -> 0
        let mut s = state2([0.0; 2], [1.0; 2], [0.7, -0.3], [1.3, 0.6]);
        s.gamma = vec![1.0, 1.0];
        let x = Tensor::new(vec![1, 2, 1, 1], vec![0.7, -0.3]).unwrap();
        let y = normalize(&x, StatsChoice::Target, &s).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn normalize_affine_maps_unit_residual() {
        // gamma=2, beta=3 applied where (x - mu)/sqrt(sigma^2+eps) = 1 -> 5
        let mut s = state2([0.0; 1], [1.0; 1], [0.0; 1], [1.0; 1]);
        s.mu_s = vec![0.0];
        s.sigma_s = vec![1.0];
        s.mu_t = vec![0.0];
        s.sigma_t = vec![1.0];
        s.gamma = vec![2.0];
        s.beta = vec![3.0];
        let x = Tensor::new(vec![1, 1, 1, 1], vec![(1.0f64 + DEFAULT_EPS).sqrt() as f32]).unwrap();
        let y = normalize(&x, StatsChoice::Target, &s).unwrap();
        assert!((y.data()[0] - 5.0).abs() < 1e-5);
    }

    #[test]
    fn align_commutes_with_channel_permutation() {
        let mut a = state2([0.0, 1.0], [1.0, 2.0], [3.0, -1.0], [0.5, 4.0]);
        let mut b = state2([1.0, 0.0], [2.0, 1.0], [-1.0, 3.0], [4.0, 0.5]);
        align_step(&mut a);
        align_step(&mut b);
        assert_eq!(a.mu_t[0], b.mu_t[1]);
        assert_eq!(a.mu_t[1], b.mu_t[0]);
        assert_eq!(a.sigma_t[0], b.sigma_t[1]);
    }

    #[test]
    fn eta_at_half_rejected() {
        let mut s = state2([0.0; 2], [1.0; 2], [0.0; 2], [1.0; 2]);
        s.eta_t = 0.5;
        assert!(s.validate().is_err());
    }
}
