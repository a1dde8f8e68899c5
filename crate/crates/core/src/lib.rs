//! SK-Unet cardiac MR segmentation.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors with a reverse-mode autodiff tape, plus the
//!   `TNSR` binary container and a finite-difference gradient checker.
//! - [`blocks`]: squeeze-and-excitation residual and selective-kernel blocks.
//! - [`network`]: the encoder/decoder model, loss, Adam training and checkpoints.
//! - [`preprocess`], [`postprocess`], [`metrics`]: the volume pipeline around
//!   the network.
//! - [`phantom`]: synthetic cardiac volumes with exact ground truth.

// `Float` is f32 unless the `f64` feature is on, so its casts are not no-ops.
#![allow(clippy::unnecessary_cast)]

pub mod blocks;
pub mod error;
pub mod gradsuite;
pub mod kv;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod postprocess;
pub mod preprocess;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Float, Tape, Tensor, Var};
