use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be >= 1")]
    InvalidShape(Vec<usize>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss node must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("batch norm in train mode needs at least 2 samples, got {0}")]
    DegenerateBatch(usize),
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidRate(f64),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    DivergedTraining { epoch: usize, loss: f64 },
    #[error("validation metric is not finite: {0}")]
    InvalidMetric(f64),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("region mass is undefined for an all-zero heatmap")]
    Undefined,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
