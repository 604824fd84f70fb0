use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the crate. The variants double as failure
/// categories for the command-line exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("infeasible dataset spec: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("subspace undefined: no class mean has been initialized")]
    SubspaceUndefined,

    #[error("degenerate feature: zero-norm vector")]
    ZeroNorm,

    #[error("component empty: total weight is zero")]
    EmptyComponent,

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse(_) => 2,
            Error::InvalidInput(_) | Error::Infeasible(_) => 3,
            Error::Format { .. } => 4,
            Error::Io(_) | Error::Json(_) => 5,
            Error::Numerical(_) => 6,
            Error::SubspaceUndefined | Error::ZeroNorm | Error::EmptyComponent => 7,
        }
    }
}
