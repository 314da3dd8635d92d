//! Multiview latent diffusion whose denoising step passes through an explicit
//! 3D Gaussian representation rendered by differentiable splatting.

pub mod autodiff;
pub mod camera;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gaussians;
pub mod image;
pub mod metrics;
pub mod render;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
