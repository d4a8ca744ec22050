//! Counting objects in synthetic scenes from referring expressions.
//!
//! The pipeline: a scene generator stands in for frozen image/text backbones
//! and emits a four-level feature pyramid plus token embeddings; a density
//! estimator scores cross-modal similarity and predicts how many referred
//! objects sit where; attention stages sharpen the visual features; a
//! query-based decoder localises individual objects; set-matching losses
//! train the whole thing end to end on an exact reverse-mode tape.

pub mod cadattn;
pub mod cadgen;
pub mod cadquery;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod evalinfer;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod scenegen;
pub mod tensor;
pub mod train;

/// Errors shared across the crate. Every fallible public operation returns
/// one of these rather than panicking; panics are reserved for internal
/// logic bugs.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{context}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{context}: {message}")]
    Invalid {
        context: &'static str,
        message: String,
    },
    #[error("{context}: non-finite value")]
    NonFinite { context: &'static str },
    #[error("config: {0}")]
    Config(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(context: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid {
            context,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
