use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error(
        "training diverged at iteration {iter} (lr {lr:.3e}; l_i={l_i}, l_b={l_b}, l_c={l_c}): {cause}"
    )]
    Diverged {
        iter: usize,
        lr: f64,
        l_i: f64,
        l_b: f64,
        l_c: f64,
        cause: String,
    },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 2 config, 3 I/O, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::InvalidArgument(_) | Error::Config(_) => 2,
            Error::Io { .. } | Error::Format(_) | Error::Json(_) => 3,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::CheckFailed(_) => 4,
        }
    }
}
