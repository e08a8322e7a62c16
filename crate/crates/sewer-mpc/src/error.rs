use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Network description text could not be parsed.
    #[error("config parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    /// A single network element failed validation.
    #[error("element '{element}': {message}")]
    Element { element: String, message: String },
    /// Network-level validation failure (routing, catchments, global keys).
    #[error("invalid network: {0}")]
    Network(String),
    /// An argument was outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// Incompatible dimensions between model and supplied data.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// The QP solver could not produce a usable answer.
    #[error("solver failure: {0}")]
    Solver(String),
    /// Command line usage error.
    #[error("{0}")]
    Usage(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command line tools: configuration and
    /// validation problems map to 2, solver failures to 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Element { .. }
            | Error::Network(_)
            | Error::Domain(_)
            | Error::Dimension(_)
            | Error::Usage(_) => 2,
            Error::Solver(_) => 3,
            Error::Io(_) | Error::Json(_) => 1,
        }
    }
}
