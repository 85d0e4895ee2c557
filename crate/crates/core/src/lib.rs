//! Interactive drag editing of 3D Gaussian scenes.
//!
//! The pipeline renders four views of a Gaussian cloud, adapts a small
//! multi-view denoiser to them with LoRA, drags handle points in the DDIM
//! latent of all four views jointly, and refits the masked Gaussians to the
//! edited images.

pub mod camera;
pub mod config;
pub mod diffusion;
pub mod dragedit;
pub mod error;
pub mod gsplat;
pub mod image;
pub mod lora;
pub mod numerics;
pub mod refit;
pub mod render;
pub mod scenes;

pub use error::{Error, Result};
