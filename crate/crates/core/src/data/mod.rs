//! Dataset ingestion and the view augmentation pipeline.

pub mod augment;
pub mod cifar;
pub mod image;
pub mod synth;

pub use augment::{augment, AugmentParams, AugmentPair};
pub use cifar::{load_cifar, parse_cifar};
pub use image::{Image, ImageRecord};
pub use synth::{synth_dataset, SynthManifest};
