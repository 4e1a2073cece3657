//! Crate-level error type for fallible domain operations.
//!
//! Shape violations inside the tensor engine are programming errors and
//! panic with both shapes in the message; the variants here cover conditions
//! a caller can legitimately hit and handle.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Normalizing a zero direction with a zero epsilon guard.
    #[error("zero direction: cannot normalize the zero vector with eps_k = 0")]
    ZeroDirection,

    /// Dense materialization requested above the oracle size guard.
    #[error("dense materialization refused: d = {d} exceeds the oracle guard of {max}")]
    OversizeDense { d: usize, max: usize },

    /// Mismatched operand extents in a delta operation.
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    /// Channel-axis compression requires kernel_size == d_v.
    #[error("channel-axis compression: kernel size {kernel_size} must equal d_v = {d_v}")]
    ChannelKernelSize { kernel_size: usize, d_v: usize },

    /// Invalid model or train configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training aborted on a non-finite loss.
    #[error("non-finite loss at step {step}{}", match .layer { Some(l) => format!(" (first non-finite gradient in `{l}`)"), None => String::new() })]
    NonFiniteLoss { step: usize, layer: Option<String> },

    /// Malformed or truncated checkpoint file.
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
