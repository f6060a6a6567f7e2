//! Diffusion time discretization.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`. Coefficient arrays are stored 0-based
//! internally and always recomputed from a [`ScheduleSpec`]; they are never
//! persisted. All arithmetic is 64-bit because the cumulative products
//! underflow single precision long before `T = 1000`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// First and last variance of the linear schedule.
pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;

/// Offset of the squared-cosine profile and its per-step variance cap.
pub const COSINE_OFFSET: f64 = 0.008;
pub const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// How the reverse-process standard deviation `σ_t` is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMode {
    /// `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`, the forward posterior variance.
    Posterior,
    /// `σ_t² = β_t`.
    Beta,
}

/// The persisted part of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub variance_mode: VarianceMode,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            kind: ScheduleKind::Linear,
            variance_mode: VarianceMode::Posterior,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.kind, self.variance_mode)
    }
}

/// Precomputed per-timestep coefficients. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind, variance_mode: VarianceMode) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        let beta = match kind {
            ScheduleKind::Linear => linear_betas(steps),
            ScheduleKind::Cosine => cosine_betas(steps),
        };
        if let Some(t) = beta.iter().position(|b| !b.is_finite() || *b <= 0.0 || *b >= 1.0) {
            return Err(Error::NumericFailure(format!(
                "beta at t={} is {} (must lie in (0, 1))",
                t + 1,
                beta[t]
            )));
        }

        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        if let Some(t) = alpha_bar.iter().position(|ab| !ab.is_finite() || *ab <= 0.0) {
            return Err(Error::NumericFailure(format!(
                "cumulative alpha underflowed at t={}",
                t + 1
            )));
        }

        let sigma = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                let var = match variance_mode {
                    VarianceMode::Posterior => beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i]),
                    VarianceMode::Beta => beta[i],
                };
                var.sqrt()
            })
            .collect();

        Ok(Self {
            spec: ScheduleSpec {
                steps,
                kind,
                variance_mode,
            },
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.spec.steps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.spec.kind
    }

    pub fn variance_mode(&self) -> VarianceMode {
        self.spec.variance_mode
    }

    /// Fails unless `1 ≤ t ≤ T`.
    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    #[inline]
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// `ᾱ_{t−1}`, with `ᾱ_0 = 1`.
    #[inline]
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    #[inline]
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// Signal coefficient `√ᾱ_t` of the forward marginal.
    #[inline]
    pub fn signal_scale(&self, t: usize) -> f64 {
        self.alpha_bar(t).sqrt()
    }

    /// Noise coefficient `√(1 − ᾱ_t)` of the forward marginal.
    #[inline]
    pub fn noise_scale(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }
}

fn linear_betas(steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![LINEAR_BETA_START];
    }
    let span = LINEAR_BETA_END - LINEAR_BETA_START;
    let last = (steps - 1) as f64;
    (0..steps)
        .map(|i| LINEAR_BETA_START + span * i as f64 / last)
        .collect()
}

fn cosine_betas(steps: usize) -> Vec<f64> {
    let profile = |t: usize| {
        let phase = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (phase * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    (1..=steps)
        .map(|t| (1.0 - profile(t) / profile(t - 1)).min(COSINE_MAX_BETA))
        .collect()
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;

    fn linear(steps: usize) -> NoiseSchedule {
        NoiseSchedule::new(steps, ScheduleKind::Linear, VarianceMode::Posterior).unwrap()
    }

    #[test]
    fn zero_steps_rejected() {
        let err = NoiseSchedule::new(0, ScheduleKind::Linear, VarianceMode::Posterior);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn single_step_linear_uses_start_beta() {
        let s = linear(1);
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.alpha_bar(1), 0.9999);
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn linear_endpoints() {
        let s = linear(1000);
        assert_eq!(s.beta(1), LINEAR_BETA_START);
        assert!((s.beta(1000) - LINEAR_BETA_END).abs() < 1e-15);
    }

    #[test]
    fn linear_alpha_bar_at_final_step() {
        // Sequential product of (1 − β_t) evaluated with 50 significant digits.
        let expected = 4.0358297653756833148e-5;
        let s = linear(1000);
        let rel = (s.alpha_bar(1000) - expected).abs() / expected;
        assert!(rel < 1e-12, "relative error {rel:e}");
    }

    #[test]
    fn cosine_alpha_bar_reference_values() {
        // Same high-precision product for the squared-cosine profile.
        for (steps, expected) in [
            (1usize, 1.0e-3),
            (10, 2.4091724140085855264e-5),
            (1000, 2.4287669070344683560e-9),
        ] {
            let s = NoiseSchedule::new(steps, ScheduleKind::Cosine, VarianceMode::Posterior)
                .unwrap();
            let rel = (s.alpha_bar(steps) - expected).abs() / expected;
            assert!(rel < 1e-10, "T={steps}: relative error {rel:e}");
        }
    }

    #[test]
    fn strictly_decreasing_alpha_bar() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::new(1000, kind, VarianceMode::Posterior).unwrap();
            for w in s.alpha_bars().windows(2) {
                assert!(w[1] < w[0]);
            }
        }
    }

    #[test]
    fn posterior_sigma_bounded_by_beta() {
        let s = linear(1000);
        for t in 2..=1000 {
            assert!(s.sigma(t).powi(2) <= s.beta(t));
        }
    }

    #[test]
    fn beta_mode_sigma_is_sqrt_beta() {
        let s = NoiseSchedule::new(50, ScheduleKind::Linear, VarianceMode::Beta).unwrap();
        for t in 1..=50 {
            assert_eq!(s.sigma(t), s.beta(t).sqrt());
        }
    }

    #[test]
    fn timestep_bounds() {
        let s = linear(10);
        assert!(s.check_timestep(0).is_err());
        assert!(s.check_timestep(11).is_err());
        assert!(s.check_timestep(1).is_ok());
        assert!(s.check_timestep(10).is_ok());
    }
}
