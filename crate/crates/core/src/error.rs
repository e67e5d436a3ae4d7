use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("non-finite loss{}", describe_position(*epoch, *batch))]
    NonFiniteLoss {
        epoch: Option<usize>,
        batch: Option<usize>,
    },

    #[error("label {label} out of range for {num_classes} classes (sample {sample})")]
    LabelOutOfRange {
        label: usize,
        num_classes: usize,
        sample: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("epoch {epoch} absorbed after epoch {last}; checkpoints must arrive in increasing order")]
    OutOfOrderEpoch { epoch: usize, last: usize },

    #[error("pruning request would remove every remaining weight ({kept} kept, removing {requested})")]
    PruneEverything { kept: usize, requested: usize },

    #[error("rewind checkpoint missing at {0}; enable rewind snapshotting (imp.rewind_epoch) and rerun round 0")]
    MissingRewind(PathBuf),

    #[error("degenerate classifier: logit variance is zero")]
    DegenerateClassifier,

    #[error("covariance is singular after regularization (condition number {condition:.3e})")]
    SingularCovariance { condition: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("no positive samples: {0}")]
    NoPositives(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    InvalidConfig(Vec<String>),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

fn describe_position(epoch: Option<usize>, batch: Option<usize>) -> String {
    match (epoch, batch) {
        (Some(e), Some(b)) => format!(" at epoch {e}, batch {b}"),
        (None, Some(b)) => format!(" at batch {b}"),
        (Some(e), None) => format!(" at epoch {e}"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
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
