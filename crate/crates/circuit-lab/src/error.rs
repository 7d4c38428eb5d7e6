//! Error type shared by every module in the crate.
//!
//! Each variant carries enough context to be actionable from the command
//! line: file paths, byte offsets, offending shapes, epoch numbers. The CLI
//! maps variants onto stable process exit codes via [`Error::exit_code`].

use std::path::Path;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value (bad hyperparameter, fraction out of
    /// range, unknown identifier in a config field, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Two tensor shapes that must agree do not. Names the operation and
    /// both shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Input is structurally valid but carries no usable signal
    /// (zero-variance data, an all-masked loss row, an all-zero report).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A token sequence does not fit the model's context window.
    #[error("sequence length {len} exceeds limit {max}")]
    Length { len: usize, max: usize },

    /// A word that the tokenizer has never seen.
    #[error("unknown token {token:?}")]
    UnknownToken { token: String },

    /// Malformed text input (JSONL, CSV); names the line.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Malformed binary input; names the byte offset.
    #[error("{path}: bad file format at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    /// Two artifacts that must describe the same data do not (fingerprint,
    /// dimension, or capture mismatch between trace sets).
    #[error("comparison mismatch: {0}")]
    Comparison(String),

    /// Loss became non-finite during optimization.
    #[error("training diverged at epoch {epoch}, step {step}: {msg}")]
    Training {
        epoch: usize,
        step: usize,
        msg: String,
    },

    /// A numeric kernel received or produced a non-finite value outside of
    /// training (where divergence is reported as [`Error::Training`]).
    #[error("non-finite value in {0}")]
    Numeric(String),

    /// A report directory is missing required artifacts.
    #[error("incomplete report directory {dir}: missing {missing:?}")]
    Report { dir: String, missing: Vec<String> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Attach a path to an `std::io::Error`.
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Attach a path to a serde_json error.
    pub fn json(path: impl AsRef<Path>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Stable process exit code for this error class:
    /// 2 = configuration, 3 = data/format, 4 = training divergence,
    /// 5 = comparison mismatch.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Shape { .. }
            | Error::Degenerate(_)
            | Error::Length { .. }
            | Error::UnknownToken { .. }
            | Error::Parse { .. }
            | Error::Format { .. }
            | Error::Numeric(_)
            | Error::Report { .. }
            | Error::Io { .. }
            | Error::Json { .. } => 3,
            Error::Training { .. } => 4,
            Error::Comparison(_) => 5,
        }
    }
}
