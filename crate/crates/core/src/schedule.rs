use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// DDPM noise-schedule constants shared by training and sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_cumprod: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` over `steps`.
    pub fn linear(beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Format("noise schedule needs at least one step".into()));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        Self::linear(cfg.beta_start, cfg.beta_end, cfg.noise_steps)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Format(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_cumprod = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_cumprod,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < self.len() {
            Ok(())
        } else {
            Err(Error::TOutOfRange { t, steps: self.len() })
        }
    }

    /// `(sqrt(abar_t), sqrt(1 - abar_t))`.
    pub fn signal_noise(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let a = self.alpha_cumprod[t];
        Ok((a.sqrt(), (1.0 - a).sqrt()))
    }

    /// Timesteps visited by an `n`-step sampler, descending, evenly spaced
    /// and always starting at `T - 1`.
    pub fn sampling_timesteps(&self, n: usize) -> Vec<usize> {
        let total = self.len();
        let n = n.clamp(1, total);
        (0..n)
            .map(|i| {
                let t = (total as f64 - i as f64 * total as f64 / n as f64).round() as usize;
                t.saturating_sub(1)
            })
            .collect()
    }
}
