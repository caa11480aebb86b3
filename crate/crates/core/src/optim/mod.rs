//! Optimization numerics: adaptive gradient clipping, AdamW, learning-rate
//! and momentum schedules, and the momentum-encoder update.
//!
//! Everything here operates on flat `f64` parameter/gradient vectors.

mod adamw;
mod clip;
mod schedule;

pub use adamw::{AdamW, AdamWConfig};
pub use clip::{ClipConfig, ClipState, GroupedClip};
pub use schedule::{cosine_lr, momentum_encoder_update, EmaSchedule};

/// Euclidean norm of a flat vector.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
