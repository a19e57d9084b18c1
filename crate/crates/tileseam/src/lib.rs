//! Tiled-inference engine and diagnostics for normalization-induced tiling
//! artifacts in sliding-window dense prediction.
//!
//! The crate trains small 3D U-Nets with four feature-normalization
//! strategies (BatchNorm, InstanceNorm, tracked InstanceNorm, BatchRenorm,
//! plus no normalization), runs halo-cropped sliding-window inference, and
//! measures two diagnostics: tile mismatch between overlapping tile
//! predictions and the train/eval disparity of a single model. Everything is
//! 64-bit and bit-reproducible so that "seamless" can be asserted as exact
//! equality rather than a tolerance.

pub mod diagnose;
pub mod error;
pub mod infer;
pub mod io;
pub mod layers;
pub mod synthdata;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{SplitMix64, Tensor};
