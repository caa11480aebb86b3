//! Asymmetric patch sampling for contrastive learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: crop boxes, patch grids and overlap ratios in image space
//! - [`sampler`]: sparse (uniform) and selective (overlap-penalized) patch sampling
//! - [`analyzer`]: closed-form overlap expectations and Monte Carlo estimators
//! - [`objective`]: the stop-gradient, temperature-scaled contrastive loss
//! - [`optim`]: adaptive gradient clipping, AdamW, schedules, momentum updates
//! - [`model`]: a small vision transformer with projection/prediction heads and
//!   hand-written backpropagation
//! - [`data`]: CIFAR ingestion, synthetic data and view augmentation
//! - [`train`]: the end-to-end training step, kNN probe and checkpoints

pub mod analyzer;
pub mod data;
pub mod error;
pub mod geometry;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
