//! Uncertainty-aware mean-teacher training for semi-supervised 3D segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: synthetic phantom volumes, preprocessing, augmentation, batching, volume I/O
//! - [`nn`]: a small 3D encoder-decoder with explicit dropout sites, forward and backward
//! - [`uncertainty`]: Monte-Carlo dropout passes and voxelwise predictive entropy
//! - [`losses`]: supervised and masked consistency losses, ramp schedules
//! - [`train`]: SGD student updates, EMA teacher, checkpoints and logs
//! - [`inference`]: sliding-window full-volume prediction
//! - [`metrics`]: Dice, Jaccard, average surface distance and 95% Hausdorff distance
//! - [`config`] and [`commands`]: the experiment configuration and CLI entry points
//!
//! Data-parallel loops (per-sample network passes, Monte-Carlo passes, sliding windows,
//! per-case evaluation) run on rayon when the `parallel` feature is enabled and fall
//! back to plain iterators otherwise. Results are identical either way.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod real;
pub mod rng;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
pub use real::Real;
