//! Pixel-space diffusion teacher, consistency distillation and few-step
//! guided super-resolution for small images.

pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod params;
pub mod samplers;
pub mod schedule;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tensor, Var};
