use thiserror::Error;

/// Errors surfaced by the reconstruction library.
#[derive(Debug, Error)]
pub enum Error {
    /// Degenerate or otherwise unusable pill geometry.
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    /// A spec or configuration value is out of its admissible range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Field dimensions do not match the grid they are used with.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// Element or pill index outside the valid range.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// An operation was called with inputs that violate its contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The solver hit a non-recoverable condition (non-finite values, ...).
    #[error("solver failure: {0}")]
    Solver(String),

    /// Structured-text parse failure with location information.
    #[error("parse error in {path} (line {line}): {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
