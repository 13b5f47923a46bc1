//! Multimodal outlier synthesis in feature space, plus the losses, small
//! two-stream network, scoring rules, metrics and benchmarks needed to
//! train and evaluate detectors with it.

pub mod error;
pub mod features;
pub mod gauss;
pub mod synth;
pub mod losses;
pub mod scores;
pub mod metrics;
pub mod datagen;
pub mod model;
pub mod bench;
pub mod gradcheck;

pub use error::{Error, Result};
pub use features::{FeatureMatrix, LabeledFeatureSet, LogitMatrix, ModalitySet, ProbMatrix, RandomSource};
