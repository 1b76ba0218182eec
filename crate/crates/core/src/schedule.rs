//! Discrete variance-preserving diffusion schedule.
//!
//! States are indexed `0..=T` and transitions `1..=T`; the transition `t`
//! maps the state at `t` to the state at `t - 1`.

use serde::{Deserialize, Serialize};

use crate::error::{PfldError, Result};

/// Which variance the ancestral update injects at each transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaConvention {
    /// `beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    #[default]
    Posterior,
    /// `beta_t`.
    Beta,
}

/// Plain-number description of a linear schedule, as it appears in configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
    #[serde(default)]
    pub sigma_convention: SigmaConvention,
}

fn default_beta_min() -> f64 {
    1e-4
}

fn default_beta_max() -> f64 {
    0.02
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_min: default_beta_min(),
            beta_max: default_beta_max(),
            sigma_convention: SigmaConvention::Posterior,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear_with(self.steps, self.beta_min, self.beta_max, self.sigma_convention)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    steps: usize,
    // index t - 1 holds transition t
    beta: Vec<f64>,
    alpha: Vec<f64>,
    // index t holds state t
    alpha_bar: Vec<f64>,
    sigma_tilde: Vec<f64>,
    convention: SigmaConvention,
}

impl DiffusionSchedule {
    /// Linear beta schedule with the posterior-variance convention.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        Self::linear_with(steps, beta_min, beta_max, SigmaConvention::Posterior)
    }

    pub fn linear_with(
        steps: usize,
        beta_min: f64,
        beta_max: f64,
        convention: SigmaConvention,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(PfldError::invalid("schedule needs at least one step"));
        }
        if !beta_min.is_finite() || !beta_max.is_finite() {
            return Err(PfldError::invalid("beta bounds must be finite"));
        }
        if !(beta_min > 0.0 && beta_max < 1.0) {
            return Err(PfldError::invalid(format!(
                "beta bounds must lie in (0, 1), got [{beta_min}, {beta_max}]"
            )));
        }
        if beta_min > beta_max {
            return Err(PfldError::invalid(format!(
                "beta_min {beta_min} exceeds beta_max {beta_max}"
            )));
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![beta_min]
        } else {
            let span = (steps - 1) as f64;
            (0..steps)
                .map(|i| beta_min + (beta_max - beta_min) * i as f64 / span)
                .collect()
        };
        Self::from_betas(beta, convention)
    }

    /// Builds a schedule from explicit per-transition rates `beta[0] = beta_1`.
    pub fn from_betas(beta: Vec<f64>, convention: SigmaConvention) -> Result<Self> {
        if beta.is_empty() {
            return Err(PfldError::invalid("schedule needs at least one step"));
        }
        if let Some(b) = beta.iter().find(|b| !(b.is_finite() && **b > 0.0 && **b < 1.0)) {
            return Err(PfldError::invalid(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * a);
        }
        let sigma_tilde = beta
            .iter()
            .enumerate()
            .map(|(i, &b)| match convention {
                SigmaConvention::Posterior => {
                    let t = i + 1;
                    (b * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])).sqrt()
                }
                SigmaConvention::Beta => b.sqrt(),
            })
            .collect();
        Ok(Self {
            steps: beta.len(),
            beta,
            alpha,
            alpha_bar,
            sigma_tilde,
            convention,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn convention(&self) -> SigmaConvention {
        self.convention
    }

    /// Rejects anything that is not a transition index `1..=T`.
    pub fn check_transition(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            Err(PfldError::StepOutOfRange { t, max: self.steps })
        } else {
            Ok(())
        }
    }

    pub fn check_state(&self, t: usize) -> Result<()> {
        if t > self.steps {
            Err(PfldError::StepOutOfRange { t, max: self.steps })
        } else {
            Ok(())
        }
    }

    // The accessors below panic on out-of-range indices; public entry points
    // validate `t` first.

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma_tilde(&self, t: usize) -> f64 {
        self.sigma_tilde[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`, so that
    /// `z_t = signal * z_0 + noise * eps`.
    pub fn marginal_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_state(t)?;
        let ab = self.alpha_bar[t];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Error-free product in double-double arithmetic.
    fn dd_mul(a: (f64, f64), b: f64) -> (f64, f64) {
        let p = a.0 * b;
        let e = a.0.mul_add(b, -p);
        let lo = e + a.1 * b;
        let s = p + lo;
        (s, lo - (s - p))
    }

    #[test]
    fn single_step_degenerate() {
        let s = DiffusionSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5]);
        assert_eq!(s.sigma_tilde(1), 0.0);
    }

    #[test]
    fn two_step_constant_beta() {
        let s = DiffusionSchedule::linear(2, 0.1, 0.1).unwrap();
        assert_relative_eq!(s.alpha_bar(0), 1.0);
        assert_relative_eq!(s.alpha_bar(1), 0.9, epsilon = 1e-15);
        assert_relative_eq!(s.alpha_bar(2), 0.81, epsilon = 1e-15);
        let (sig, noise) = s.marginal_coeffs(2).unwrap();
        assert_relative_eq!(sig, 0.9, epsilon = 1e-15);
        assert_relative_eq!(noise, 0.19f64.sqrt(), epsilon = 1e-15);
        assert_eq!(s.marginal_coeffs(0).unwrap(), (1.0, 0.0));
    }

    #[test]
    fn thousand_step_product_matches_double_double_oracle() {
        let s = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut acc = (1.0, 0.0);
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            acc = dd_mul(acc, 1.0 - beta);
        }
        let oracle = acc.0 + acc.1;
        assert_relative_eq!(s.alpha_bar(1000), oracle, max_relative = 1e-10);
        let (_, noise) = s.marginal_coeffs(1000).unwrap();
        assert!(noise >= 0.999);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(DiffusionSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(DiffusionSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(DiffusionSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(DiffusionSchedule::linear(10, 0.02, 1e-4).is_err());
        assert!(DiffusionSchedule::linear(10, f64::NAN, 0.02).is_err());
        let s = DiffusionSchedule::linear(10, 1e-4, 0.02).unwrap();
        assert!(s.marginal_coeffs(11).is_err());
        assert!(s.check_transition(0).is_err());
    }

    #[test]
    fn beta_convention_uses_full_variance() {
        let s = DiffusionSchedule::linear_with(5, 0.01, 0.2, SigmaConvention::Beta).unwrap();
        for t in 1..=5 {
            assert_relative_eq!(s.sigma_tilde(t), s.beta(t).sqrt());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn schedule_invariants(
                steps in 1usize..400,
                lo in 1e-5f64..0.05,
                span in 0.0f64..0.5,
            ) {
                let hi = (lo + span).min(0.9);
                let s = DiffusionSchedule::linear(steps, lo, hi).unwrap();
                prop_assert_eq!(s.alpha_bar(0), 1.0);
                for t in 1..=steps {
                    prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                    prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                    let rel = (s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() / s.alpha_bar(t);
                    prop_assert!(rel <= 1e-12);
                    prop_assert!(s.sigma_tilde(t) <= s.beta(t).sqrt() * (1.0 + 1e-12));
                    let expect = s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t));
                    prop_assert!((s.sigma_tilde(t).powi(2) - expect).abs() <= 1e-15);
                }
                for t in 0..=steps {
                    let (a, b) = s.marginal_coeffs(t).unwrap();
                    prop_assert!((a * a + b * b - 1.0).abs() <= 1e-12);
                }
            }
        }
    }
}
