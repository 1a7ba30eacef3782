//! Pixel-space conditional diffusion: schedule, denoiser, training, DDPM and
//! DDIM samplers, DDIM inversion and reconstruction metrics.

pub mod checkpoint;
pub mod metrics;
pub mod net;
pub mod sampler;
pub mod schedule;
pub mod tape;
pub mod train;

pub use checkpoint::Checkpoint;
pub use metrics::psnr;
pub use net::{Denoiser, NetConfig};
pub use sampler::{
    ddim_invert, ddim_invert_step, ddim_step, ddpm_step, forward_diffuse, reconstruct, sample, InversionConfig,
    NoisePredictor, NoisyState,
};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use train::{train_step, Adam, AdamConfig};
