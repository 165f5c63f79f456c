//! Unsupervised source→target domain adaptation for heatmap-based 2D keypoint
//! estimation, built on a small reverse-mode autodiff engine.
//!
//! The pipeline trains a heatmap estimator on a labeled synthetic "adult"
//! domain, then adapts it to an unlabeled "infant" domain with a mean-teacher
//! consistency loss, a learned pose-plausibility prior, and a
//! keypoint-to-silhouette context regularizer. Everything runs on the CPU in
//! f64 and is bit-reproducible given a seed.

pub mod config;
pub mod context;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nets;
pub mod pipeline;
pub mod prior;
pub mod seeds;
pub mod synth;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
