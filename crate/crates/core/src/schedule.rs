//! Variance-preserving noise schedule.
//!
//! The signal rate falls linearly from 1 at timestep 0 to `alpha_min` at the last
//! training timestep; the noise rate is `sqrt(1 - alpha^2)`. Sampling uses an
//! evenly strided subset of the training timesteps, where sampling index 0 is
//! the clean latent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRAIN_TIMESTEPS: usize = 1000;
pub const SAMPLE_STEPS: usize = 50;
/// Final signal rate, close to the square root of the last cumulative alpha of
/// the scaled-linear schedule used by latent-diffusion backbones.
pub const ALPHA_MIN: f64 = 0.068;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub train_timesteps: usize,
    pub sample_steps: usize,
    pub alpha_min: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_timesteps: TRAIN_TIMESTEPS,
            sample_steps: SAMPLE_STEPS,
            alpha_min: ALPHA_MIN,
        }
    }
}

/// Per-step `(alpha, sigma)` pairs over the sampling steps `0..=n_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    timesteps: Vec<usize>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

fn signal_rate(t: usize, cfg: &ScheduleConfig) -> f64 {
    1.0 - (1.0 - cfg.alpha_min) * t as f64 / cfg.train_timesteps as f64
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        if config.train_timesteps == 0 || config.sample_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !config.train_timesteps.is_multiple_of(config.sample_steps) {
            return Err(Error::Config(format!(
                "{} training timesteps cannot be strided evenly into {} sampling steps",
                config.train_timesteps, config.sample_steps
            )));
        }
        if !(config.alpha_min > 0.0 && config.alpha_min < 1.0) {
            return Err(Error::Config(format!(
                "alpha_min must lie in (0, 1), got {}",
                config.alpha_min
            )));
        }
        let stride = config.train_timesteps / config.sample_steps;
        let timesteps: Vec<usize> = (0..=config.sample_steps).map(|k| k * stride).collect();
        let alpha: Vec<f64> = timesteps.iter().map(|&t| signal_rate(t, &config)).collect();
        let sigma: Vec<f64> = alpha.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
        let schedule = Self {
            config,
            timesteps,
            alpha,
            sigma,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    fn validate(&self) -> Result<()> {
        if self.alpha[0] != 1.0 || self.sigma[0] != 0.0 {
            return Err(Error::Config("schedule must start at alpha = 1, sigma = 0".into()));
        }
        for k in 1..self.alpha.len() {
            if self.alpha[k] >= self.alpha[k - 1] || self.sigma[k] <= self.sigma[k - 1] {
                return Err(Error::Config(format!("schedule is not monotone at step {k}")));
            }
        }
        for (k, (a, s)) in self.alpha.iter().zip(&self.sigma).enumerate() {
            if (a * a + s * s - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("alpha^2 + sigma^2 != 1 at step {k}")));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    /// Number of sampling transitions (the last valid step index).
    pub fn n_steps(&self) -> usize {
        self.timesteps.len() - 1
    }

    pub fn timestep(&self, step: usize) -> usize {
        self.timesteps[step]
    }

    pub fn alpha(&self, step: usize) -> f64 {
        self.alpha[step]
    }

    pub fn sigma(&self, step: usize) -> f64 {
        self.sigma[step]
    }

    pub fn check_step(&self, step: usize) -> Result<()> {
        if step > self.n_steps() {
            Err(Error::Domain(format!(
                "step {step} outside schedule of {} steps",
                self.n_steps()
            )))
        } else {
            Ok(())
        }
    }

    pub fn train_timesteps(&self) -> usize {
        self.config.train_timesteps
    }

    /// `(alpha, sigma)` at an arbitrary training timestep.
    pub fn train_rates(&self, t: usize) -> (f64, f64) {
        let a = signal_rate(t, &self.config);
        (a, (1.0 - a * a).max(0.0).sqrt())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(ScheduleConfig::default()).expect("default schedule is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants_hold() {
        let s = NoiseSchedule::default();
        assert_eq!(s.n_steps(), 50);
        assert_eq!(s.timestep(40), 800);
        assert_eq!((s.alpha(0), s.sigma(0)), (1.0, 0.0));
        for k in 0..=s.n_steps() {
            assert!((s.alpha(k).powi(2) + s.sigma(k).powi(2) - 1.0).abs() < 1e-15);
        }
        assert!((s.alpha(50) - ALPHA_MIN).abs() < 1e-12);
    }

    #[test]
    fn rejects_uneven_stride() {
        let cfg = ScheduleConfig {
            train_timesteps: 1000,
            sample_steps: 30,
            alpha_min: 0.1,
        };
        assert!(NoiseSchedule::new(cfg).is_err());
    }
}
