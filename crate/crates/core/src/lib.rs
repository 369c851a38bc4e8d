//! Cross-modal transformer sleep staging.
//!
//! A self-contained implementation of epoch- and sequence-level cross-modal
//! transformers for 5-class sleep stage classification from EEG and EOG:
//!
//! - [`tensor`] / [`tape`] / [`nn`]: a minimal reverse-mode autodiff engine
//!   with every primitive the models need (f32 for training, f64 for
//!   finite-difference verification);
//! - [`filter`] / [`labels`] / [`pipeline`] / [`manifest`] / [`dataset`]: the
//!   preprocessing chain from raw signal manifests to segmented, labeled,
//!   subject-independent datasets;
//! - [`model`]: the epoch and sequence cross-modal transformers;
//! - [`adam`] / [`train`]: weighted cross-entropy training with 5-fold
//!   cross-validation and resumable runs;
//! - [`metrics`]: confusion-matrix metrics (accuracy, Cohen's kappa, macro
//!   F1/sensitivity/specificity/G-mean);
//! - [`interpret`]: intra-modal, cross-modal, and inter-epoch attention
//!   scores with CSV/JSON/SVG export;
//! - [`gradcheck`]: central finite-difference verification of every
//!   differentiable primitive and the composed model;
//! - [`synth`]: synthetic separable recordings for tests and demos.
//!
//! The `parallel` feature (default) runs independent recordings, inference
//! windows, and large kernels on a rayon pool; without it everything is
//! sequential with identical results.

pub mod adam;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod filter;
pub mod gradcheck;
pub mod interpret;
pub mod labels;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Artifact version stamped into command outputs.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
