//! Auto-regressive generative pre-training for point clouds.
//!
//! A cloud is cut into farthest-point-sampled KNN patches, the patches are
//! ordered along a Morton curve and embedded by a mini-PointNet, and an
//! extractor-generator transformer decoder learns to predict each next patch
//! from the ones before it. Everything, including the differentiation tape, is
//! implemented here on plain CPU buffers.

mod binio;
pub mod checks;
pub mod cli;
pub mod data;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod nncore;
pub mod sequencer;
pub mod training;

pub use error::{Error, Result};
