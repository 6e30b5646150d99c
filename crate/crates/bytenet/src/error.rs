//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

use crate::data::bucket::BucketId;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible for the attempted operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An API precondition was violated (bad axis, empty batch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid model or training configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A character or n-gram id outside of the known vocabulary.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// Inference asked for normalization statistics of a bucket that was
    /// never seen during training.
    #[error("no running normalization statistics for bucket {bucket} (layer {layer})")]
    MissingStats { bucket: BucketId, layer: String },

    /// Corpus bytes that do not decode as UTF-8.
    #[error("invalid UTF-8 in {}: byte offset {offset}", path.display())]
    CorpusEncoding { path: PathBuf, offset: usize },

    /// Non-finite gradient; the optimizer step is aborted.
    #[error("non-finite gradient in parameter `{param}` at step {step}")]
    NonFiniteGrad { param: String, step: u64 },

    /// Non-finite training loss.
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    /// Malformed, truncated, or corrupt checkpoint data.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Decoding failed (e.g. no hypothesis finished within the length cap).
    #[error("decode error: {0}")]
    Decode(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
}

impl Error {
    /// Wraps an I/O error with the path it concerns. Bare `io::Error`
    /// messages rarely name the file, which makes CLI errors useless.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
