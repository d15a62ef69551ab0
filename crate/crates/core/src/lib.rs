//! Conditioned vehicle motion diffusion: scenario extraction, kinematic motion
//! parameters, a context VQ-VAE, classifier-free guided diffusion with
//! uncertainty-adaptive guidance, and evaluation metrics.

pub mod blob;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scenario;
pub mod uncertainty;
pub mod vmm;
pub mod vqvae;

pub use error::{Error, Result};
