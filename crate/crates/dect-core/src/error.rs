use std::path::PathBuf;

/// Error type shared by all core operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (bad sizes, empty ranges, inconsistent options).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input file; reports the offending line where known.
    #[error("parse error in {path} (line {line}): {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Array/geometry shape mismatch.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Missing or inconsistent data artifacts (files, manifests, hashes).
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure (NaN/Inf, divergence, degenerate inputs).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Dim(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}
