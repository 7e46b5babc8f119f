use std::path::PathBuf;

use crate::train::CheckpointSeries;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure modes shared by every module.
///
/// Each variant maps onto one of the command-line exit codes through
/// [`Error::exit_code`]: configuration problems exit with 1, data and parse
/// problems with 2, numeric failures with 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },

    #[error("parameter layout mismatch: {0}")]
    Layout(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid configuration `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("bad magic number in {what}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("truncated {what}: needed {needed} bytes, found {found}")]
    Truncated {
        what: &'static str,
        needed: usize,
        found: usize,
    },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged {
        epoch: usize,
        completed: Box<CheckpointSeries>,
    },

    #[error("model too large for curvature probes: {params} parameters (limit {limit})")]
    ModelTooLarge { params: usize, limit: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Layout(_) => "layout",
            Error::Numeric(_) => "numeric",
            Error::Config { .. } => "config",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::BadMagic { .. } => "bad_magic",
            Error::Truncated { .. } => "truncated",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::Diverged { .. } => "diverged",
            Error::ModelTooLarge { .. } => "model_too_large",
            Error::Io { .. } => "io",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config { .. } | Error::ModelTooLarge { .. } => 1,
            Error::Numeric(_) | Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}
