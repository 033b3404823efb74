//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or arguments: caller gave us something that can
    /// never work, regardless of runtime state.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shapes or dimensions that violate an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A checkpoint or stats file that cannot be read, parsed, or validated.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A numeric value that must be finite was NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A pluggable backend (teacher, text encoder, perceptual net) was
    /// requested by name but is not compiled into this build.
    #[error("backend `{0}` is not available; available: {1}")]
    BackendUnavailable(String, String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("{0}")]
    Msg(String),
}

impl Error {
    /// Process exit code for this error: 1 for configuration and usage
    /// problems, 2 for runtime failures. Stable contract for scripting.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::BackendUnavailable(..) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for ad-hoc error construction in deeply nested code.
pub fn msg(m: impl Into<String>) -> Error {
    Error::Msg(m.into())
}
