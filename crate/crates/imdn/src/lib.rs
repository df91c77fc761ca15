//! Single-image super-resolution engine built around the information
//! multi-distillation network (IMDN).
//!
//! The crate is organized as a small stack of layers:
//!
//! * [`tensor`] — dense rank-4 `f64` tensors in NCHW layout and the forward
//!   numeric primitives (convolution, activations, channel split/concat,
//!   pixel shuffle, contrast pooling).
//! * [`autograd`] — a tape-based reverse-mode differentiator over those
//!   primitives, plus the L1 loss.
//! * [`optim`] — Adam and the step-halving learning-rate schedule.
//! * [`model`] — builders and forward semantics for IMDN, IMDN_AS and the
//!   ablation variants, weight initialization and serialization.
//! * [`analysis`] — exact parameter / multiply-accumulate accounting over a
//!   built model graph.
//! * [`tiler`] — the adaptive cropping strategy: four corner-anchored
//!   overlapping patches with divisible-by-4 sides, forwarded independently
//!   and pasted back.
//! * [`image`] — PNG I/O, RGB↔Y conversion and bicubic resampling.
//! * [`metrics`] — PSNR / SSIM on the luminance channel and patch sampling
//!   for training.
//! * [`train`] — the training loop orchestrating all of the above.
//! * [`gradcheck`] — the finite-difference verification harness.
//!
//! Inference never mutates a model, so a built [`model::ModelGraph`] can be
//! shared across threads. With the default `parallel` feature the inner
//! loops of convolution, tiled inference and dataset evaluation run on
//! rayon; disabling the feature compiles the sequential fallback. Both paths
//! produce bit-identical results.

pub mod analysis;
pub mod autograd;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod tiler;
pub mod train;

mod parallel;

pub use tensor::{ConvLayer, Tensor, TensorError};
