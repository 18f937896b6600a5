//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside its mathematical domain (e.g. a time outside [0, 1]).
    #[error("domain error: {0}")]
    Domain(String),

    /// Matrix or vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A computation produced NaN/Inf or an otherwise unusable numeric state.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// The noise scale at the sampled time is too small to form the training target.
    /// Callers treat this as "redraw t", not as a fatal error.
    #[error("noise scale {lambda:.3e} below epsilon at t={t}; skip sample")]
    DegenerateNoise { t: f64, lambda: f64 },

    /// A batch or weighting degenerated (e.g. every class skipped in a local MMD).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Configuration rejected; `path` is the dotted field path.
    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    /// A required file or checkpoint is absent.
    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn missing_input(msg: impl Into<String>) -> Self {
        Error::MissingInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
