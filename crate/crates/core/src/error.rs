//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Which structural check a container or dataset parser failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseKind {
    /// Magic bytes do not identify the expected format.
    BadMagic,
    /// Container version is not supported.
    VersionMismatch,
    /// Byte stream ended before the declared payload.
    Truncated,
    /// Declared lengths disagree with the payload actually present.
    LengthMismatch,
    /// Manifest or header content is malformed.
    Manifest,
    /// A record carries an out-of-range value (e.g. CIFAR label > 9).
    BadValue,
    /// CSV header line is missing or wrong.
    CsvHeader,
    /// A CSV row is malformed.
    CsvRow,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{context}: rejected input: {message}")]
    RejectedInput { context: String, message: String },

    #[error("{context}: non-finite values")]
    NonFinite { context: String },

    #[error("invalid config at {path}: {message}")]
    Config { path: String, message: String },

    #[error("parse error ({kind:?}): {message}")]
    Parse { kind: ParseKind, message: String },

    #[error("target assignment row {row}: {message}")]
    TargetRow { row: usize, message: String },

    #[error("training diverged at epoch {epoch}: loss became non-finite")]
    TrainingDiverged { epoch: usize },

    #[error("attack failed at iteration {iteration} on model {model}: {message}")]
    Attack {
        iteration: usize,
        model: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub fn rejected(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::RejectedInput {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn parse(kind: ParseKind, message: impl Into<String>) -> Self {
        Error::Parse {
            kind,
            message: message.into(),
        }
    }

    /// Parse kind, when this is a parse error. Tests match on this.
    pub fn parse_kind(&self) -> Option<ParseKind> {
        match self {
            Error::Parse { kind, .. } => Some(*kind),
            _ => None,
        }
    }
}
