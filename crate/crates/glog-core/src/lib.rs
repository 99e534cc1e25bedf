//! Differentiable Gabor and Laplacian-of-Gaussian filter banks feeding a
//! toy U-shaped windowed-attention segmentation pipeline.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`] — a dense `f64`/`f32` tensor and the reverse-mode
//!   tape with exactly the ops the pipeline needs (conv, GELU, layer norm,
//!   window attention plumbing, losses).
//! - [`filters`] — Gabor and LoG kernel generation from learnable
//!   parameters, with closed-form derivatives of every tap with respect to
//!   every parameter.
//! - [`embed`] — the convolutional patch embedding that concatenates the
//!   input image with the filter-bank responses.
//! - [`model`] — a small encoder/decoder of window-attention + convolution
//!   blocks with skip connections and a per-pixel class head.
//! - [`metrics`] — Dice and 95th-percentile Hausdorff distance.
//! - [`synth`], [`optim`], [`train`] — synthetic oriented-texture data,
//!   AdamW, and the training/ablation harness.
//! - [`gradcheck`] — finite-difference validation suites shared by the
//!   test-suite and the `glog gradcheck` subcommand.
//!
//! Everything numeric is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the `*64` aliases below are the concrete types the CLI and the
//! acceptance tests use.

pub mod checkpoint;
mod conv;
pub mod embed;
pub mod error;
pub mod filters;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` tensor, the precision used by the shipped pipeline.
pub type Tensor64 = tensor::Tensor<f64>;
/// `f64` autodiff tape.
pub type Tape64 = tape::Tape<f64>;
/// `f64` filter bank.
pub type FilterBank64 = filters::FilterBank<f64>;
/// `f64` model weights.
pub type ModelWeights64 = model::ModelWeights<f64>;

