//! Gated rank-1 residual learning: a verifiable numeric core plus a
//! byte-level transformer training harness.
//!
//! The central object is the delta operator `A = I - beta * k k^T` for a unit
//! direction `k` and a scalar gate `beta` in (0, 2): a rank-1 perturbation of
//! the identity that interpolates between identity (`beta = 0`), orthogonal
//! projection (`beta = 1`) and Householder reflection (`beta = 2`). Residual
//! blocks apply it to the hidden state together with a synchronized rank-1
//! write, `X' = X + beta * k (v^T - k^T X)`.
//!
//! Crate layout:
//!
//! - [`tensor`]: dense arrays with reverse-mode differentiation;
//! - [`delta`]: the operator core — normalization, fused application,
//!   spectrum, determinant, the additive delta update;
//! - [`block`]: the vector-state (`d_v = 1`) residual block;
//! - [`expansion`]: the expanded-state (`d_v > 1`) regime with the
//!   compress/process/expand protocol and its conv variants;
//! - [`backbone`]: a small pre-norm transformer (RMSNorm, RoPE attention
//!   with QK-norm, SwiGLU MLP) whose residual rule is switchable;
//! - [`trainer`]: byte-level corpus ingestion, AdamW with cosine schedule,
//!   checkpointing, metrics;
//! - [`verify`]: independent oracle suite over every closed-form property;
//! - [`cli`]: the `ddl` command-line entry points.

pub mod backbone;
pub mod block;
pub mod cli;
pub mod delta;
pub mod error;
pub mod expansion;
pub mod param;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor};
