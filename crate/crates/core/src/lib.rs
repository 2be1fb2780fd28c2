//! Class-balancing conditional diffusion on synthetic long-tailed data.
//!
//! The crate covers the forward noising schedule, a small conditional noise
//! predictor with exact reverse-mode gradients, the class-balancing and
//! trainable-guidance objectives, long-tailed Gaussian-mixture datasets, a
//! deterministic trainer, DDPM/DDIM/guided samplers, closed-form 1-D oracles
//! for the prior-adjustment identity and its training bound, and raw-feature
//! evaluation metrics.

pub mod data;
pub mod denoiser;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod oracle;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
