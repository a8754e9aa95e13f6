//! Face parsing with RoI tanh-warping.
//!
//! The crate covers landmark alignment and the invertible tanh warp, a small
//! reverse-mode autodiff kernel, the hybrid segmentation network with its
//! training loop, evaluation metrics and the file formats used by the CLI.

pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod labels;
pub mod model;
pub mod raster;
pub mod sampler;
pub mod training;

pub use error::{Error, Result};
