//! Classifier-free guided DDPM over motion-parameter sequences.

mod model;
mod schedule;
mod unet;

pub use model::{
    sample, sample_many, train_diffusion, ChannelNorm, DiffEpochLoss, DiffusionHyperParams, DiffusionManifest, GuidanceAdjust,
    DiffusionTrainOutput, Denoiser, GuidanceRequest, PredictionTarget, DIFFUSION_FORMAT,
};
pub use schedule::{
    build_schedule, denoise_step, denoise_with, forward_noise, guided_noise, noise_with, NoiseSchedule, MIN_ALPHA,
};
pub use unet::{step_embedding, UNet, UNetArch};
