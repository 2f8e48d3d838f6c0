use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library. Each variant carries a stable code used by
/// the CLI as a diagnostic prefix (see [`Error::code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid skeleton: {}", .0.join("; "))]
    InvalidSkeleton(Vec<String>),

    #[error("invalid bounds: {0}")]
    InvalidBounds(String),

    #[error("degenerate bone {bone}: norm {norm:e} is too small for a gradient")]
    DegenerateBone { bone: usize, norm: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite training loss at epoch {epoch}, step {step}{}", replay_hint(.replay))]
    Diverged {
        epoch: usize,
        step: usize,
        replay: Option<PathBuf>,
    },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn replay_hint(replay: &Option<PathBuf>) -> String {
    match replay {
        Some(p) => format!(" (batch saved to {})", p.display()),
        None => String::new(),
    }
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "E-SHAPE",
            Error::InvalidSkeleton(_) => "E-SKELETON",
            Error::InvalidBounds(_) => "E-BOUNDS",
            Error::DegenerateBone { .. } => "E-DEGENERATE",
            Error::Empty(_) => "E-EMPTY",
            Error::InvalidArgument(_) => "E-ARG",
            Error::NonFinite(_) => "E-NONFINITE",
            Error::Diverged { .. } => "E-DIVERGED",
            Error::Checkpoint(_) => "E-CHECKPOINT",
            Error::Parse { .. } => "E-PARSE",
            Error::Io { .. } => "E-IO",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
