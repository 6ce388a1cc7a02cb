//! Late-fusion land-cover segmentation from aerial imagery and satellite
//! time series.

pub mod aerial;
pub mod benchmark;
pub mod dataset;
pub mod evaluation;
mod error;
pub mod fusion;
pub mod layers;
pub mod model;
pub mod preprocess;
pub mod temporal;
pub mod training;
pub mod types;

pub use error::{Error, Result};

pub type AerialBranch32 = aerial::AerialBranch<f32>;
pub type AerialBranch64 = aerial::AerialBranch<f64>;
pub type TemporalBranch32 = temporal::TemporalBranch<f32>;
pub type TemporalBranch64 = temporal::TemporalBranch<f64>;
pub type SegmentationModel32 = model::SegmentationModel<f32>;
pub type SegmentationModel64 = model::SegmentationModel<f64>;
pub type Sample32 = dataset::Sample<f32>;
pub type Sample64 = dataset::Sample<f64>;
pub type Batch32 = dataset::Batch<f32>;
pub type Batch64 = dataset::Batch<f64>;
pub type ClassProbabilityMap32 = types::ClassProbabilityMap<f32>;
pub type ClassProbabilityMap64 = types::ClassProbabilityMap<f64>;
