//! Error taxonomy shared across the toolkit.
//!
//! Variants are grouped by failure class so callers (and the CLI exit-code
//! mapping) can distinguish bad inputs from degenerate numerics from runtime
//! plumbing without string-matching messages.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid argument or malformed input data (shape mismatch, empty cloud,
    /// bad config value, unparsable file, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Geometric configuration that admits no unique answer (collinear
    /// correspondences, coincident points under PCA, empty overlap, ...).
    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    /// Too few correspondences survived selection to estimate a pose.
    #[error("insufficient matches: {0}")]
    InsufficientMatches(String),

    /// Numerical failure at runtime (non-finite loss, SVD breakdown, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Checkpoint/config compatibility violation (digest or version mismatch).
    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    /// Filesystem/IO failure with the offending path.
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Parse failure with file context.
    #[error("parse failure in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

impl Error {
    /// Helper building [`Error::Io`] with path context.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Helper building [`Error::Parse`] with path context.
    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), msg: msg.into() }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
