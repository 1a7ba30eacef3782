//! Forward diffusion, the stochastic reverse step, its deterministic
//! (`sigma = 0`) specialization, and DDIM inversion.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::findings::FindingVector;
use crate::image::Image;
use crate::rng::Rng;

/// Anything that predicts the noise component of a noisy image.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, x: &Image, t: usize, c: &FindingVector) -> Result<Image>;
}

impl NoisePredictor for super::Denoiser {
    fn predict_noise(&self, x: &Image, t: usize, c: &FindingVector) -> Result<Image> {
        self.predict(x, t, c)
    }
}

/// `eps(x, t) = scale * x`, for checking sampler algebra.
#[derive(Debug, Clone, Copy)]
pub struct LinearPredictor {
    pub scale: f64,
}

impl NoisePredictor for LinearPredictor {
    fn predict_noise(&self, x: &Image, _t: usize, _c: &FindingVector) -> Result<Image> {
        Ok(x.map(|v| self.scale * v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyState {
    pub x: Image,
    pub t: usize,
}

fn gaussian_image(width: usize, height: usize, rng: &mut Rng) -> Image {
    Image::from_fn(width, height, |_, _| StandardNormal.sample(rng))
}

/// Standard normal noise shaped like `like`.
pub fn noise_like(like: &Image, rng: &mut Rng) -> Image {
    gaussian_image(like.width(), like.height(), rng)
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps`.
pub fn diffuse_with(alpha_bar: f64, x0: &Image, eps: &Image) -> Result<Image> {
    x0.ensure_same_shape(eps)?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Image::from_vec(x0.width(), x0.height(), data)
}

pub fn forward_diffuse(schedule: &NoiseSchedule, x0: &Image, t: usize, eps: &Image) -> Result<NoisyState> {
    if t > schedule.t_train() {
        return Err(Error::invalid(format!("timestep {t} beyond t_train {}", schedule.t_train())));
    }
    Ok(NoisyState { x: diffuse_with(schedule.alpha_bar(t), x0, eps)?, t })
}

/// One reverse update from `state.t` to `t_prev < state.t`:
///
/// `x' = sqrt(ab') * (x - sqrt(1 - ab) * e) / sqrt(ab) + sqrt(1 - ab' - sigma^2) * e + sigma * z`
///
/// with `e` the predicted noise and `z` drawn from `rng` only when `sigma > 0`.
pub fn reverse_step<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    state: &NoisyState,
    c: &FindingVector,
    t_prev: usize,
    sigma: f64,
    rng: Option<&mut Rng>,
) -> Result<NoisyState> {
    if state.t == 0 {
        return Err(Error::invalid("cannot step back from t = 0"));
    }
    if t_prev >= state.t {
        return Err(Error::invalid(format!("target timestep {t_prev} is not before {}", state.t)));
    }
    let ab = schedule.alpha_bar(state.t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let sigma_max = (1.0 - ab_prev).sqrt();
    if !(0.0..=sigma_max).contains(&sigma) {
        return Err(Error::invalid(format!("sigma {sigma} outside [0, {sigma_max}]")));
    }
    let eps = model.predict_noise(&state.x, state.t, c)?;
    let x0_scale = ab_prev.sqrt() / ab.sqrt();
    let eps_x0 = (1.0 - ab).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut data: Vec<f64> =
        state.x.data().iter().zip(eps.data()).map(|(x, e)| x0_scale * (x - eps_x0 * e) + dir * e).collect();
    if sigma > 0.0 {
        let rng = rng.ok_or_else(|| Error::invalid("stochastic step needs a random stream"))?;
        let z = noise_like(&state.x, rng);
        for (d, zv) in data.iter_mut().zip(z.data()) {
            *d += sigma * zv;
        }
    }
    Ok(NoisyState { x: Image::from_vec(state.x.width(), state.x.height(), data)?, t: t_prev })
}

/// Stochastic reverse step `t -> t - 1`.
pub fn ddpm_step<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    state: &NoisyState,
    c: &FindingVector,
    sigma: f64,
    rng: &mut Rng,
) -> Result<NoisyState> {
    if state.t == 0 {
        return Err(Error::invalid("cannot step back from t = 0"));
    }
    reverse_step(model, schedule, state, c, state.t - 1, sigma, Some(rng))
}

/// Deterministic reverse step `state.t -> t_prev`.
pub fn ddim_step<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    state: &NoisyState,
    c: &FindingVector,
    t_prev: usize,
) -> Result<NoisyState> {
    reverse_step(model, schedule, state, c, t_prev, 0.0, None)
}

/// Inversion refinement. With `refine_iters = 0` this is plain DDIM
/// inversion, which reuses the noise predicted at the lower timestep.
/// Each refinement re-predicts the noise at the current estimate of the
/// upper state and re-solves, converging to the exact preimage of
/// [`ddim_step`] when the iteration contracts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub refine_iters: usize,
    pub tolerance: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self { refine_iters: 0, tolerance: 0.0 }
    }
}

/// Deterministic forward-in-time step `state.t -> t_next`.
pub fn ddim_invert_step<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    state: &NoisyState,
    c: &FindingVector,
    t_next: usize,
    inversion: &InversionConfig,
) -> Result<NoisyState> {
    if t_next <= state.t || t_next > schedule.t_train() {
        return Err(Error::invalid(format!("invalid inversion target {t_next} from {}", state.t)));
    }
    let ab = schedule.alpha_bar(state.t);
    let ab_next = schedule.alpha_bar(t_next);
    let solve = |eps: &Image| -> Result<Image> {
        let (a, b) = ((ab_next / ab).sqrt(), (1.0 - ab_next).sqrt() - (ab_next / ab).sqrt() * (1.0 - ab).sqrt());
        let data = state.x.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
        Image::from_vec(state.x.width(), state.x.height(), data)
    };
    let mut next = solve(&model.predict_noise(&state.x, state.t, c)?)?;
    for _ in 0..inversion.refine_iters {
        let refined = solve(&model.predict_noise(&next, t_next, c)?)?;
        let change = refined.data().iter().zip(next.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        next = refined;
        if change <= inversion.tolerance {
            break;
        }
    }
    Ok(NoisyState { x: next, t: t_next })
}

/// Runs the deterministic update forward in time over the strided schedule,
/// from the clean image to `t_train`.
pub fn ddim_invert<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    x0: &Image,
    c: &FindingVector,
    n_steps: usize,
    inversion: &InversionConfig,
) -> Result<NoisyState> {
    let ts = schedule.strided(n_steps)?;
    let mut state = NoisyState { x: x0.clone(), t: 0 };
    for &t_next in &ts[1..] {
        state = ddim_invert_step(model, schedule, &state, c, t_next, inversion)?;
    }
    Ok(state)
}

/// Iterated [`ddim_step`] from `t_train` to 0 over the strided schedule,
/// clamped to `[0, 1]`.
pub fn sample<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    terminal: &NoisyState,
    c: &FindingVector,
    n_steps: usize,
) -> Result<Image> {
    let ts = schedule.strided(n_steps)?;
    if terminal.t != schedule.t_train() {
        return Err(Error::invalid(format!(
            "terminal state is at t = {}, expected {}",
            terminal.t,
            schedule.t_train()
        )));
    }
    let mut state = terminal.clone();
    for &t_prev in ts[..ts.len() - 1].iter().rev() {
        state = ddim_step(model, schedule, &state, c, t_prev)?;
    }
    Ok(state.x.clamp01())
}

/// Inverts under `c` and samples back under `c`.
pub fn reconstruct<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    x0: &Image,
    c: &FindingVector,
    n_steps: usize,
    inversion: &InversionConfig,
) -> Result<Image> {
    let latent = ddim_invert(model, schedule, x0, c, n_steps, inversion)?;
    sample(model, schedule, &latent, c, n_steps)
}

/// A fresh terminal latent drawn from the prior.
pub fn prior_sample(schedule: &NoiseSchedule, width: usize, height: usize, rng: &mut Rng) -> NoisyState {
    NoisyState { x: gaussian_image(width, height, rng), t: schedule.t_train() }
}
