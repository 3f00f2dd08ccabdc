use thiserror::Error;

/// Errors produced by the numerical pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    Diverged {
        iteration: usize,
        loss: f64,
        history: Vec<f64>,
    },

    #[error("unrealizable direction: arcsin argument {argument} exceeds 1")]
    Unrealizable { argument: f64 },

    #[error("malformed artifact {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("{path}: {kind}: {message}")]
    Config {
        path: String,
        kind: ConfigErrorKind,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Category of a configuration failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigErrorKind {
    Missing,
    Syntax,
    UnknownKey,
    Invariant,
}

impl std::fmt::Display for ConfigErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConfigErrorKind::Missing => "file not found",
            ConfigErrorKind::Syntax => "syntax error",
            ConfigErrorKind::UnknownKey => "unknown key",
            ConfigErrorKind::Invariant => "invalid value",
        })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(context: &'static str, expected: impl ToString, actual: impl ToString) -> Error {
    Error::Dimension {
        context,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
