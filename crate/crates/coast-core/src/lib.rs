//! Two-stage domain-adaptive segmentation on procedurally generated scenes:
//! adversarial warm-up, then cooperative self-training with cross-domain
//! feature stylization, pseudo-label rectification, and distillation into a
//! domain-agnostic head.

/// Scalar element type for all tensor buffers. `f64` by default so
/// finite-difference gradient checks are meaningful; the `f32` feature
/// switches the whole crate to single precision.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

pub mod augment;
pub mod checks;
pub mod config;
pub mod autograd;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod opt;
pub mod selftrain;
pub mod style;
pub mod rng;
pub mod trainer;
pub mod warmup;

pub use autograd::{grad_check, Tape, Tensor, TensorId, EPS_KL, EPS_STATS};
pub use error::{CoastError, Result};
