use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor shape does not satisfy an operation's requirements.
    #[error("{op}: dimension mismatch{}: {detail}", axis.map(|a| format!(" on axis {a}")).unwrap_or_default())]
    Dimension {
        op: &'static str,
        axis: Option<usize>,
        detail: String,
    },

    /// A configuration value is invalid. `field` is a dotted path such as `stages[2].heads`.
    #[error("invalid config field `{field}`: {detail}")]
    Config { field: String, detail: String },

    /// The caller violated an operation contract (non-scalar loss, missing gradient, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: u64, detail: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("failed to parse {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis: None,
            detail: detail.into(),
        }
    }

    pub(crate) fn dim_axis(op: &'static str, axis: usize, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis: Some(axis),
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
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

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"IPTCKPT1\"")]
    BadMagic,

    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),

    #[error("tensor `{name}`: checkpoint shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),

    #[error("checkpoint holds tensor `{0}` that the model does not have")]
    UnexpectedTensor(String),

    #[error("tensor name is not valid UTF-8")]
    BadName,
}
