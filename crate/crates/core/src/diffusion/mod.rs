//! Gaussian diffusion in latent space: linear variance schedule, closed-form
//! forward corruption, the epsilon-prediction objective, and DDPM / DDIM
//! reverse samplers.

mod sample;
mod schedule;

pub use sample::{
    ddim_sample, ddim_sample_from, ddim_step, ddpm_sample, ddpm_step, forward_sample,
    gaussian_latent, predict_z0, training_target_loss, Denoiser,
};
pub use schedule::{ddim_timesteps, make_linear_schedule, NoiseSchedule};
