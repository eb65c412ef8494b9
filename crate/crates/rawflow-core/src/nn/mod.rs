//! Shared trainable building blocks and the autodiff machinery behind them.

pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod phi;
pub mod tape;
pub mod unet;

pub use params::{AdamConfig, Init, ParamId, ParamStore};
pub use phi::PhiNet;
pub use tape::{NodeId, Tape};
pub use unet::{FeaturePyramid, UNet, UNetSpec};
