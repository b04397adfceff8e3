use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RkmError>;

#[derive(Debug, Error)]
pub enum RkmError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{0} requires a nonempty sequence")]
    EmptySequence(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("time index {t} out of range for sequence of length {len}")]
    TimeOutOfRange { t: usize, len: usize },

    #[error("token id {token} is outside the vocabulary of size {vocab}")]
    UnknownToken { token: usize, vocab: usize },

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("malformed signal file {path}: {msg}")]
    Signal { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RkmError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        RkmError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
