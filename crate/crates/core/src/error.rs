//! Error type shared by every module, with the CLI exit-code mapping.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("temperature must be positive")]
    InvalidTemperature,

    #[error("empty input")]
    EmptyInput,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("backward called twice on the same graph")]
    StaleGraph,

    #[error("optimizer state does not match parameter: {0}")]
    StateUninitialized(String),

    #[error("duplicate trainable parameter id '{0}'")]
    DuplicateParam(String),

    #[error("invalid configuration: {0}")]
    ConfigError(String),

    #[error("category name is empty")]
    EmptyCategory,

    #[error("rotation requires a square grid, got {height}x{width}")]
    NonSquareInput { height: usize, width: usize },

    #[error("unsupported view count {0}: only 1, 2 or 4 views are exact")]
    UnsupportedViewCount(usize),

    #[error("no synonym entry for category '{0}'")]
    MissingCategory(String),

    #[error("category '{category}' has {got} synonyms, expected {expected}")]
    InconsistentSynonymCount {
        category: String,
        expected: usize,
        got: usize,
    },

    #[error("synonym file format error at line {line}: {reason}")]
    FormatError { line: usize, reason: String },

    #[error("adaptation diverged: non-finite loss")]
    AdaptationDiverged,

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("window {window} exceeds image extent {height}x{width}")]
    WindowTooLarge {
        window: usize,
        height: usize,
        width: usize,
    },

    #[error("label {value} out of range for {classes} classes")]
    InvalidLabel { value: usize, classes: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 internal invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigError(_)
            | Error::InvalidTemperature
            | Error::UnsupportedViewCount(_)
            | Error::WindowTooLarge { .. }
            | Error::EmptyCategory => 1,
            Error::Io { .. }
            | Error::FormatError { .. }
            | Error::MissingCategory(_)
            | Error::InconsistentSynonymCount { .. }
            | Error::ShapeMismatch(_)
            | Error::NonFinite(_)
            | Error::EmptyInput
            | Error::NonSquareInput { .. }
            | Error::InvalidLabel { .. } => 2,
            Error::StaleGraph
            | Error::StateUninitialized(_)
            | Error::DuplicateParam(_)
            | Error::AdaptationDiverged
            | Error::Internal(_) => 3,
        }
    }
}
