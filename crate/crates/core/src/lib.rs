//! Score-distillation toolkit for diffusion-prior image editing.
//!
//! The crate provides the gradient estimators used to steer a parametric
//! image towards a target prompt (plain distillation, delta denoising,
//! dual-classifier, stable score distillation with its cross-prompt and
//! cross-trajectory decomposition, prompt enhancement, source-latent
//! anchoring and instruction-editing guidance), an optimization loop around
//! them, evaluation metrics, and an exact Gaussian-mixture denoiser that
//! makes every estimator checkable in closed form.

pub mod cli;
pub mod denoiser;
pub mod distill;
pub mod edit;
pub mod error;
pub mod exec;
pub mod field;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod schedule;
pub mod selftest;

pub use error::{Error, Result};
pub use field::Field;
