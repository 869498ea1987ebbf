//! Algorithmic core for `anomoe`: zero-shot anomaly detection with
//! compositional prompt mixtures.
//!
//! Images from classes never seen during training are scored by comparing
//! patch features from a frozen vision encoder against text embeddings of
//! two learned prompts, one describing the "normal" state and one the
//! "abnormal" state. Instead of a single monolithic prompt pair, each prompt
//! is composed per instance: an image-gated sparse router selects a few
//! expert segments from a learnable pool and blends them into the prompt
//! sequence, layer by layer.
//!
//! The crate is `no_std` (with `alloc`) and carries no IO. It provides:
//!
//! - [`tensor`]: dense row-major tensors over `f32`/`f64`
//! - [`ops`]: the forward operations the model needs plus their hand-derived
//!   backward counterparts
//! - [`optim`]: parameter registry and Adam
//! - [`gradcheck`]: central finite-difference verification of every gradient
//! - [`encoder`]: seeded, frozen toy vision/text encoders
//! - [`moe`]: cross-attention query pooling, sparse top-k expert routing,
//!   and prompt assembly
//! - [`loss`]: segmentation/classification losses and the two mixture
//!   regularizers (load balance, expert decoupling)
//! - [`scoring`]: pixel anomaly maps and image-level scores
//! - [`metrics`]: AUROC, average precision, pixel AUROC, and PRO
//! - [`model`]: the assembled detector with its full training gradient
//!
//! File formats, dataset generation, training orchestration, and the CLI
//! live in the companion `anomoe` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod encoder;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod ops;
pub mod optim;
pub mod scoring;
pub mod tensor;

use alloc::string::String;
use core::fmt;

/// Errors surfaced by the numeric core.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    /// Tensor shapes do not line up for the requested operation.
    Shape(String),
    /// An argument is outside its documented domain.
    Param(String),
    /// Malformed caller-provided data (images, prompts, masks).
    Input(String),
    /// A computation produced non-finite or otherwise unusable values.
    Eval(String),
    /// Inconsistent configuration.
    Config(String),
    /// A metric is undefined for the given inputs (e.g. single-class labels).
    UndefinedMetric(String),
    /// Internal invariant violation; indicates a bug rather than bad input.
    Internal(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape(m) => write!(f, "shape error: {m}"),
            CoreError::Param(m) => write!(f, "parameter error: {m}"),
            CoreError::Input(m) => write!(f, "input error: {m}"),
            CoreError::Eval(m) => write!(f, "evaluation error: {m}"),
            CoreError::Config(m) => write!(f, "config error: {m}"),
            CoreError::UndefinedMetric(m) => write!(f, "undefined metric: {m}"),
            CoreError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

pub type Result<T> = core::result::Result<T, CoreError>;

pub use tensor::{Real, Tensor};
