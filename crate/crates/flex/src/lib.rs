//! Feedback-refined multi-level ROI feature extraction.
//!
//! Two-stage classification over a feature pyramid: a pre-classification pass
//! fuses pyramid levels with Gaussian weights centered at the level implied by
//! ROI area, then a feedback refine pass re-fuses the levels with weights
//! conditioned on image content and on the first pass's class distribution.
//! Everything runs on a small `f64` reverse-mode tensor core, and a synthetic
//! scene generator with mean-kernel blurring provides a CPU-scale benchmark
//! for the blur-adaptation and information-gain behavior of the feedback path.
//!
//! Start from the `examples/` directory: each example is a runnable tour of
//! one capability (dataset synthesis, training, evaluation, the fusion-weight
//! machinery, gradient checking, and the blur / information-gain analyses).
//! The same functionality is scriptable through the thin `flex` binary.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod feedback;
pub mod preclass;
pub mod pyramid;
pub mod synthgen;
pub mod trainer;

pub use error::{FlexError, Result};
