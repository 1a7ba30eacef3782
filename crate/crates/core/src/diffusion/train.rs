//! Noise-prediction training: `|eps - eps_hat(sqrt(ab) x0 + sqrt(1 - ab) eps, t, c)|^2`
//! averaged over pixels and batch, optimized with Adam.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::Denoiser;
use super::sampler::{diffuse_with, noise_like};
use super::schedule::NoiseSchedule;
use super::tape::ParamStore;
use crate::error::{Error, Result};
use crate::findings::FindingVector;
use crate::image::Image;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Self { config, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. A zero learning rate leaves `params` untouched
    /// while still advancing the moment estimates.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                if lr != 0.0 {
                    p.data[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                }
            }
        }
    }
}

/// One training example with its timestep and noise already drawn.
#[derive(Debug, Clone)]
pub struct NoisedExample<'a> {
    pub x0: &'a Image,
    pub c: &'a FindingVector,
    pub t: usize,
    pub eps: Image,
}

/// Draws `t ~ U{1..T}` then `eps ~ N(0, I)` for each example, in batch order.
pub fn draw_noise<'a>(
    schedule: &NoiseSchedule,
    batch: &'a [(Image, FindingVector)],
    rng: &mut Rng,
) -> Vec<NoisedExample<'a>> {
    batch
        .iter()
        .map(|(x0, c)| {
            let t = rng.random_range(1..=schedule.t_train());
            let eps = noise_like(x0, rng);
            NoisedExample { x0, c, t, eps }
        })
        .collect()
}

/// Mean squared noise-prediction error and its gradient for fixed draws.
pub fn loss_and_grad(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    examples: &[NoisedExample<'_>],
) -> Result<(f64, Vec<Vec<f64>>)> {
    if examples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let per_example: Vec<(f64, Vec<Vec<f64>>)> = examples
        .par_iter()
        .map(|ex| {
            let xt = diffuse_with(schedule.alpha_bar(ex.t), ex.x0, &ex.eps)?;
            let mut grads = net.params().zeros_like();
            let sse = net.sse_and_grad(&xt, ex.t, ex.c, &ex.eps, &mut grads)?;
            Ok((sse, grads))
        })
        .collect::<Result<_>>()?;
    let n = (examples.len() * examples[0].x0.len()) as f64;
    let mut total = 0.0;
    let mut grads = net.params().zeros_like();
    for (sse, g) in per_example {
        total += sse;
        for (acc, part) in grads.iter_mut().zip(g) {
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
    }
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v /= n;
        }
    }
    Ok((total / n, grads))
}

/// Draws noise, computes the loss, and applies one Adam update. Returns the
/// pre-update loss. A non-finite loss or gradient is reported as an error
/// and leaves the parameters unchanged.
pub fn train_step(
    net: &mut Denoiser,
    optimizer: &mut Adam,
    schedule: &NoiseSchedule,
    batch: &[(Image, FindingVector)],
    rng: &mut Rng,
    lr: f64,
) -> Result<f64> {
    let examples = draw_noise(schedule, batch, rng);
    let (loss, grads) = loss_and_grad(net, schedule, &examples)?;
    let step = optimizer.steps() + 1;
    if !loss.is_finite() {
        return Err(Error::Training { step, reason: format!("loss is {loss}") });
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Training { step, reason: "non-finite gradient".into() });
    }
    optimizer.update(net.params_mut(), &grads, lr);
    Ok(loss)
}
