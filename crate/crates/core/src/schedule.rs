//! Linear-β noise schedule and the closed-form forward/posterior algebra.
//!
//! Steps are 1-based, `t ∈ [1, T]`, with `ᾱ_0 = 1`. Tables are `f64`
//! because `ᾱ_T` underflows single precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.2;

/// Construction parameters, stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    // index 0 holds t = 1
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// β linearly spaced over `[beta_start, beta_end]`, both ends included.
    pub fn new(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "schedule needs T >= 2 and 0 < beta_start < beta_end < 1, got T={steps}, [{beta_start}, {beta_end}]"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let posterior_var = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])
            })
            .collect();
        Ok(NoiseSchedule {
            params: ScheduleParams {
                steps,
                beta_start,
                beta_end,
            },
            beta,
            alpha_bar,
            posterior_var,
        })
    }

    pub fn from_params(p: ScheduleParams) -> Result<Self> {
        Self::new(p.steps, p.beta_start, p.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        same_len(x0, eps)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    /// `x̂0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
    pub fn invert_q(&self, xt: &[f64], t: usize, eps_hat: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        same_len(xt, eps_hat)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(xt.iter().zip(eps_hat).map(|(x, e)| (x - b * e) / a).collect())
    }

    /// Model mean `√(1/α_t)·(x_t − ε̂·(1−α_t)/√(1−ᾱ_t))`.
    pub fn posterior_mean(&self, xt: &[f64], t: usize, eps_hat: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        same_len(xt, eps_hat)?;
        let alpha = self.alpha(t);
        let k = (1.0 - alpha) / (1.0 - self.alpha_bar(t)).sqrt();
        let s = (1.0 / alpha).sqrt();
        Ok(xt.iter().zip(eps_hat).map(|(x, e)| s * (x - k * e)).collect())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::from_params(ScheduleParams::default()).expect("default schedule is valid")
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;

    #[test]
    fn default_tables() {
        let s = NoiseSchedule::default();
        assert_eq!(s.beta(1), 1e-4);
        assert_relative_eq!(s.beta(1000), 0.2, max_relative = 1e-15);
        assert_eq!(s.alpha_bar(1), 0.9999);
        assert!(s.alpha_bar(1000) < 1e-40 && s.alpha_bar(1000) > 0.0);
        assert_eq!(s.posterior_var(1), 0.0);
        for t in 2..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!((0.0..=s.beta(t)).contains(&s.posterior_var(t)));
        }
    }

    #[test]
    fn bad_parameters_rejected() {
        assert!(NoiseSchedule::new(1, 1e-4, 0.2).is_err());
        assert!(NoiseSchedule::new(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::new(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::new(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn step_range_enforced() {
        let s = NoiseSchedule::new(10, 1e-4, 0.2).unwrap();
        assert!(matches!(s.q_sample(&[0.0], 0, &[0.0]), Err(Error::StepOutOfRange { t: 0, max: 10 })));
        assert!(s.invert_q(&[0.0], 11, &[0.0]).is_err());
        assert!(s.posterior_mean(&[0.0], 11, &[0.0]).is_err());
        assert!(s.q_sample(&[0.0, 1.0], 1, &[0.0]).is_err());
    }

    #[test]
    fn endpoint_cases() {
        let s = NoiseSchedule::default();
        let x0 = [1.0, -2.0];
        let t = 300;
        let xt = s.q_sample(&x0, t, &[0.0, 0.0]).unwrap();
        assert_eq!(xt, [s.alpha_bar(t).sqrt(), -2.0 * s.alpha_bar(t).sqrt()]);
        let xt = s.q_sample(&[0.0], t, &[1.5]).unwrap();
        assert_eq!(xt, [(1.0 - s.alpha_bar(t)).sqrt() * 1.5]);
        let x0_hat = s.invert_q(&[0.7], t, &[0.0]).unwrap();
        assert_relative_eq!(x0_hat[0], 0.7 / s.alpha_bar(t).sqrt(), max_relative = 1e-15);
        let mu = s.posterior_mean(&[0.7], t, &[0.0]).unwrap();
        assert_relative_eq!(mu[0], 0.7 / s.alpha(t).sqrt(), max_relative = 1e-15);
    }

    #[test]
    fn first_step_recovers_x0() {
        let s = NoiseSchedule::default();
        let x0 = [0.3, -1.2, 2.5];
        let eps = [0.5, -0.1, 1.0];
        let xt = s.q_sample(&x0, 1, &eps).unwrap();
        for (a, b) in s.invert_q(&xt, 1, &eps).unwrap().iter().zip(x0) {
            assert_relative_eq!(*a, b, max_relative = 1e-12);
        }
        for (a, b) in s.posterior_mean(&xt, 1, &eps).unwrap().iter().zip(x0) {
            assert_relative_eq!(*a, b, max_relative = 1e-6);
        }
    }

    #[test]
    fn posterior_mean_is_linear() {
        let s = NoiseSchedule::default();
        let mu = s.posterior_mean(&[0.4], 500, &[0.9]).unwrap()[0];
        let scaled = s.posterior_mean(&[0.4 * 3.0], 500, &[0.9 * 3.0]).unwrap()[0];
        assert_relative_eq!(scaled, 3.0 * mu, max_relative = 1e-12);
    }

    #[test]
    fn iterated_corruption_matches_closed_form() {
        let s = NoiseSchedule::new(50, 1e-4, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x0, t, trials) = (1.5, 20, 100_000);
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..trials {
            let mut x = x0;
            for k in 1..=t {
                let e: f64 = rng.sample(StandardNormal);
                x = s.alpha(k).sqrt() * x + s.beta(k).sqrt() * e;
            }
            sum += x;
            sq += x * x;
        }
        let mean = sum / trials as f64;
        let var = sq / trials as f64 - mean * mean;
        let ab = s.alpha_bar(t);
        assert_relative_eq!(mean, ab.sqrt() * x0, max_relative = 0.01);
        assert_relative_eq!(var, 1.0 - ab, max_relative = 0.01);
    }
}
