//! Error type shared across the crate.
//!
//! Every failure carries a short machine-parsable class (see [`Error::class`])
//! so the CLI can emit `error[<class>]: <message>` lines.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape disagreement; the message names both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Out-of-range token id, class index, or row index.
    #[error("index out of range: {0}")]
    Index(String),

    /// Operation called in the wrong order (e.g. backward twice on one tape).
    #[error("invalid state: {0}")]
    State(String),

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed or insufficient input data.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid expansion plan.
    #[error("expansion plan error: {0}")]
    Plan(String),

    /// Curriculum phases do not tile [0,1].
    #[error("curriculum error: {0}")]
    Curriculum(String),

    /// New-token embedding cannot be derived (empty constituent list).
    #[error("derivation error: {0}")]
    Derivation(String),

    /// Training aborted (e.g. NaN loss).
    #[error("training error: {0}")]
    Training(String),

    /// Parse failure in one of the on-disk formats.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable lowercase class name for machine-parsable CLI output.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Index(_) => "index",
            Error::State(_) => "state",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Plan(_) => "plan",
            Error::Curriculum(_) => "curriculum",
            Error::Derivation(_) => "derivation",
            Error::Training(_) => "training",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
