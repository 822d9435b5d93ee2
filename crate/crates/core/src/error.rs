use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
///
/// `category()` yields a stable one-word tag the CLI prints on failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("format error in {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("load error: {0}")]
    Load(String),

    #[error("missing label for sample {0}")]
    MissingLabel(u64),

    #[error("training diverged at epoch {epoch} step {step} (samples {batch:?}): {parts}")]
    Diverged {
        epoch: usize,
        step: usize,
        batch: Vec<u64>,
        parts: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract { op, msg: msg.into() }
    }

    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format { what, msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Contract { .. } => "contract",
            Error::NonFinite { .. } => "non-finite",
            Error::Format { .. } => "format",
            Error::Load(_) => "load",
            Error::MissingLabel(_) => "missing-label",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
