//! Conditional image-to-image generation of urban built-up areas with a
//! progressive-growing GAN, and a four-level evaluation toolkit for generated cities.
//!
//! Module map:
//! - [`raster`]: grids, URG1 files, resampling.
//! - [`dataset`]: city samples, manifests, the synthetic city generator.
//! - [`autodiff`]: the reverse-mode tape, Adam, the learning-rate schedule.
//! - [`gan`]: generator, discriminator, losses.
//! - [`trainer`]: progressive schedule, training loop, checkpoints, inference.
//! - [`metrics`]: pixel, pyramid, perceptual and macroscopic metrics.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod gan;
pub mod metrics;
pub mod raster;
pub mod trainer;

pub use error::{Error, Result};
