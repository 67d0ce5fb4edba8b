use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated an operation's domain (out-of-range index,
    /// invalid level, zero direction, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Numerically or geometrically degenerate input (coincident points,
    /// rank-deficient alignment, zero-area frustum, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// The octree hierarchy is inconsistent (missing parent link, ...).
    #[error("structural error: {0}")]
    Structural(String),

    /// Required input files are absent.
    #[error("missing inputs: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingInputs(Vec<PathBuf>),

    /// A loss or parameter became non-finite during training.
    #[error("non-finite value in term `{term}` at iteration {iter}{}",
            .voxel.map(|v| format!(" (voxel {v})")).unwrap_or_default())]
    NonFinite {
        iter: u64,
        term: String,
        voxel: Option<u32>,
    },

    /// A file did not match the expected format.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
