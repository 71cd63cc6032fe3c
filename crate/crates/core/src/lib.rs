//! FASL-Seg: dual-stream multiscale semantic segmentation on a small
//! self-contained tensor engine.
//!
//! The crate is layered bottom-up:
//!
//! - [`kernels`] — raw dense numeric loops (matmul, conv, attention, ...),
//!   parallelized with rayon behind the `parallel` feature and bit-identical
//!   to the sequential fallback;
//! - [`tensor`] — dense tensors with tape-based reverse-mode autodiff;
//! - [`blocks`] — the reusable network pieces (pointwise conv + BN + leaky
//!   ReLU, multi-head self-attention, upsampling chains);
//! - [`encoder`] — a hierarchical (pyramid) transformer encoder;
//! - [`model`] — the dual-stream FASL-Seg assembly and its ablation variants;
//! - [`loss`] / [`metrics`] — Tversky + cross-entropy training objective and
//!   the confusion-matrix evaluation suite;
//! - [`data`] / [`train`] — dataset handling, augmentation, synthetic data,
//!   and a deterministic Adam trainer;
//! - [`config`] / [`checkpoint`] / [`runner`] — run configuration, binary
//!   checkpoints, and the command implementations behind the `fasl` CLI.
//!
//! Determinism is a design rule throughout: every random draw flows from a
//! caller-supplied seed through per-purpose derived ChaCha streams, and every
//! floating-point reduction has a fixed order, so repeated runs (and runs
//! with `parallel` toggled) produce bit-identical artifacts.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod tensor;
pub mod train;

/// Scalar element type for all tensors: `f64` by default, `f32` when the
/// `f32` feature is enabled.
#[cfg(feature = "f32")]
pub type Elem = f32;
/// Scalar element type for all tensors: `f64` by default, `f32` when the
/// `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Elem = f64;

pub use error::{Error, Result};
pub use tensor::{Parameter, Tensor};
