//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by any purification, attack, or harness operation.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter violated its documented domain (bounds, enum values, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Array shapes incompatible with the operation.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    /// A component's declared contract (conditioning shape, latent shape)
    /// does not match what it was handed.
    #[error("contract mismatch: {0}")]
    ContractMismatch(String),

    /// An external adapter (caption model, codec checkpoint, denoiser
    /// backend) is unavailable or failed. Runs must fail, never substitute.
    #[error("adapter failure: {0}")]
    AdapterFailure(String),

    /// A gradient or loss became non-finite.
    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: String, step: usize },

    /// Training loss diverged; the epoch index is the first bad one.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    /// Configuration rejected before any work started.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
