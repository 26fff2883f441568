//! Long-tailed semi-supervised learning with continuous contrastive
//! pseudo-labels, built from scratch on a small reverse-mode tape.
//!
//! Module map:
//! - [`numerics`]: matrices, linear solves, log-domain helpers, autodiff, gradient checks
//! - [`data`]: long-tailed synthetic datasets, CSV ingestion, augmentations, batching
//! - [`model`]: encoder with standard/balanced heads and projection head, SGD
//! - [`framework`]: label-shift adjustment, kernel posteriors and the contrastive loss family
//! - [`ccl`]: the semi-supervised objective and its training loop
//! - [`metrics`]: accuracy, confusion, calibration error, prior error
//! - [`experiment`]: run configuration, multi-seed runs and ablation grids

pub mod ccl;
pub mod data;
pub mod error;
pub mod experiment;
pub mod framework;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::{Matrix, ProbVector};
