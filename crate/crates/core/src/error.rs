use std::path::PathBuf;

/// Errors produced by the `gmpool` library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "eigensolver did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})"
    )]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: invalid `{field}`: {message}")]
    Schema {
        line: usize,
        field: &'static str,
        message: String,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("training diverged in fold {fold}, epoch {epoch}, batch {batch}: {reason}")]
    Divergence {
        fold: usize,
        epoch: usize,
        batch: usize,
        reason: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
