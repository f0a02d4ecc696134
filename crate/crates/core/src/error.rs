use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {message}")]
    MalformedManifest { path: PathBuf, message: String },

    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),

    #[error("sample {id:?}: mask is {mask_h}x{mask_w} but image is {image_h}x{image_w}")]
    DimensionMismatch {
        id: String,
        image_h: usize,
        image_w: usize,
        mask_h: usize,
        mask_w: usize,
    },

    #[error("sample {id:?}: cannot decode image {path}: {message}")]
    Image {
        id: String,
        path: PathBuf,
        message: String,
    },

    #[error("invalid value for {field}: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("invalid sample {id:?}: {violations:?}")]
    InvalidSample { id: String, violations: Vec<String> },

    #[error("input {height}x{width} is not divisible by {divisor}")]
    IndivisibleInput {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("architecture fingerprint mismatch: model {model}, checkpoint {checkpoint}")]
    FingerprintMismatch { model: String, checkpoint: String },

    #[error("pretrained encoder requested but {0}")]
    PretrainedUnavailable(String),

    #[error("non-finite gradient for parameter {0:?}")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },

    #[error("cannot split {size} samples into {k} folds")]
    TooFewSamples { size: usize, k: usize },

    #[error("source run has {source_k} folds but target config asks for {target_k}")]
    FoldCountMismatch { source_k: usize, target_k: usize },

    #[error("strategy precondition violated: {0}")]
    Strategy(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// Coarse classification used by front ends to choose exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig { .. }
            | Error::FingerprintMismatch { .. }
            | Error::FoldCountMismatch { .. }
            | Error::PretrainedUnavailable(_)
            | Error::Strategy(_) => ErrorKind::Config,
            Error::NonFiniteGradient(_) | Error::Diverged { .. } => ErrorKind::Training,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Training,
}
