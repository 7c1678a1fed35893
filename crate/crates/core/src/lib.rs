//! Weakly-supervised referring video object segmentation at desk scale.

pub mod ablation;
pub mod augmentation;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod mil;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod schema;
pub mod synth;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
