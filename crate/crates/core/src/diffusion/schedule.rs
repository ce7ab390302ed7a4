use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear-beta DDPM schedule. Index 0 is the clean endpoint (`alpha_bar = 1`);
/// diffusion timesteps run `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    /// `alpha_bar(0) = 1`, otherwise the cumulative product up to `t`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::Domain {
                t,
                t_max: self.t_max,
            });
        }
        Ok(())
    }
}

pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(Error::Config(format!("schedule needs T >= 2, got {t_max}")));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let mut beta = vec![0.0; t_max + 1];
    let mut alpha_bar = vec![1.0; t_max + 1];
    for t in 1..=t_max {
        let frac = (t - 1) as f64 / (t_max - 1) as f64;
        beta[t] = beta_start + frac * (beta_end - beta_start);
        alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
    }
    Ok(NoiseSchedule {
        t_max,
        beta,
        alpha_bar,
    })
}

impl TryFrom<ScheduleConfig> for NoiseSchedule {
    type Error = Error;

    fn try_from(c: ScheduleConfig) -> Result<Self> {
        make_schedule(c.timesteps, c.beta_start, c.beta_end)
    }
}
