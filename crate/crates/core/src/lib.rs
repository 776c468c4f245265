//! Streaming memory-transformer encoder kernels.
//!
//! The crate implements the Emformer layer and its AM-TRF baseline in two
//! execution modes: a parallel, masked training-mode forward over a whole
//! utterance (with a reverse pass), and a chunked streaming forward that
//! caches left-context keys/values and carries memory vectors between
//! layers. The [`verify`] module checks that both modes agree, that no
//! output sees past its look-ahead horizon, and that the cost model matches
//! what the streaming kernel executes.

pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod features;
pub mod layer;
pub mod layout;
pub mod numerics;
pub mod verify;

pub use config::{Arch, FlopReport, ModelConfig};
pub use error::{Error, Result};
pub use numerics::{BoolMask, DType, FrameMatrix, Matrix, Scalar};
