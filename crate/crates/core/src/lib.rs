//! Streaming keyword spotting with linearized convolutions.
//!
//! A LiCo-Net is trained as a stack of streaming 1D convolutions and, when
//! its first layer strides by the chunk size and every later layer has
//! stride 1, runs at inference time as a chain of GEMVs over small ring
//! buffers (optionally in int8). This crate provides both forms, the
//! equivalence machinery between them, a log-mel frontend, a posterior
//! decoder, a single-file model format and the `liconet` CLI.

pub mod affine;
pub mod conv;
pub mod decoder;
pub mod error;
pub mod format;
pub mod frontend;
pub mod linearize;
pub mod model;
pub mod quant;
pub mod runtime;
pub mod tensor;
pub mod wav;

pub use error::{Error, FormatError, Result};
pub use tensor::Tensor2D;
