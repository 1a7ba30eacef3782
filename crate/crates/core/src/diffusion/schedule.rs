use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_train: 200, beta_start: 1e-4, beta_end: 0.04 }
    }
}

/// Linear-beta noise schedule.
///
/// Timesteps run over `0..=t_train`; `t = 0` is clean data with `alpha_bar = 1`
/// and `t >= 1` reads the cumulative tables at `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig { t_train, beta_start, beta_end } = config;
        if t_train == 0 {
            return Err(Error::invalid("t_train must be at least 1"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = if t_train == 1 {
            vec![beta_start]
        } else {
            (0..t_train).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_train - 1) as f64).collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { config, betas, alphas, alpha_bars })
    }

    pub fn make(t_train: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::new(ScheduleConfig { t_train, beta_start, beta_end })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn t_train(&self) -> usize {
        self.config.t_train
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Cumulative products, `alpha_bars()[i]` belonging to timestep `i + 1`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `alpha_bar` at timestep `t` in `0..=t_train`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `n_steps + 1` uniformly spaced timesteps from 0 to `t_train`, ascending.
    pub fn strided(&self, n_steps: usize) -> Result<Vec<usize>> {
        let t = self.t_train();
        if n_steps == 0 || n_steps > t {
            return Err(Error::invalid(format!("n_steps must be in 1..={t}, got {n_steps}")));
        }
        Ok((0..=n_steps).map(|k| (k * t + n_steps / 2) / n_steps).collect())
    }
}
