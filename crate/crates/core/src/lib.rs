//! GazeMoE: a Mixture-of-Experts transformer decoder for gaze target
//! estimation.
//!
//! The crate provides the full training and evaluation stack at desk scale:
//!
//! - [`tensor`]: dense f64 tensors with reverse-mode autodiff and a
//!   finite-difference gradient checker;
//! - [`model`]: the decoder itself: feature projection, head-prompt
//!   embedding, transformer blocks with MoE feed-forward, heatmap and
//!   in/out heads, and checkpoint I/O;
//! - [`losses`]: pixel-wise heatmap BCE, class-balanced focal loss, the
//!   combined objective, and the MSE+KL alternative;
//! - [`augment`]: joint image/annotation augmentation suite;
//! - [`metrics`]: AUC, mean L2, average precision, spherical distance;
//! - [`data`]: annotation and feature file formats plus synthetic
//!   dataset generation (a stand-in for the frozen encoder);
//! - [`train`]: Adam, cosine learning-rate schedule, the training loop,
//!   and the overfit probe.

pub mod augment;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
