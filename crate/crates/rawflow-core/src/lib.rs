//! RGB-to-RAW reconstruction as deterministic latent transport.
//!
//! The crate bundles a synthetic forward ISP (so paired RGB/RAW data with
//! exact ground truth can be generated on demand), dual-domain latent
//! autoencoders, a flow-matching module that transports RGB latents to RAW
//! latents along a learned velocity field, a three-stage trainer, and
//! PSNR/SSIM evaluation in both domains.

pub mod checkpoint;
pub mod config;
pub mod data_isp;
pub mod dataset;
pub mod dlae;
pub mod dlfm;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
