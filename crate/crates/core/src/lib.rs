//! Ultrasound neural-field reconstruction.
//!
//! A coordinate network maps scene points to five acoustic parameters
//! (attenuation, reflectance, border probability, scattering density and
//! scattering intensity). Frames are synthesised with a differentiable
//! B-mode renderer, and a small 3D voxel diffusion model, adapted with
//! low-rank updates, regularises the border and scattering channels.
//!
//! Module map:
//! - [`types`], [`geometry`], [`dataset`], [`config`], [`checkpoint`]: shared
//!   domain types, I/O and persistence.
//! - [`field`]: positional encoding and the parameter MLP.
//! - [`render`]: ultrasound transmission, B-mode composition and the
//!   standard volume-rendering alternative.
//! - [`prior`]: noise schedule, 3D denoiser, LoRA adapters and guidance.
//! - [`phantom`]: synthetic parameter volumes, patch extraction and sweep
//!   simulation.
//! - [`train`]: ray batching, losses, the optimisation loop and ablations.
//! - [`eval`]: PSNR / SSIM / MS-SSIM and test-split reports.
//! - [`cli`]: the `echofield` command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod optim;
pub mod phantom;
pub mod prior;
pub mod real;
pub mod render;
pub mod rng;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use real::Real;
pub use types::*;
