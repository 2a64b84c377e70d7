use thiserror::Error;

use crate::model::{Partition, SampleId};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("sample {id} is not in partition {from}")]
    NotInPartition { id: SampleId, from: Partition },

    #[error("sample {id} is already in partition {to}")]
    AlreadyInPartition { id: SampleId, to: Partition },

    #[error("unknown sample id {0}")]
    UnknownSample(SampleId),

    #[error("sample {0} has no label")]
    Unlabeled(SampleId),

    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("xml parse error: {0}")]
    Xml(String),

    #[error("missing element `{0}`")]
    MissingElement(String),

    #[error("missing feature rows for: {}", .0.join(", "))]
    MissingFeatures(Vec<String>),

    #[error("duplicate name `{0}`")]
    Duplicate(String),

    #[error("block {block} increased the objective in cycle {cycle} ({before} -> {after})")]
    ObjectiveIncreased {
        cycle: usize,
        block: usize,
        before: f64,
        after: f64,
    },

    #[error("oracle budget exhausted after {0} inspections")]
    BudgetExhausted(u64),

    #[error("unknown {kind} `{name}`")]
    UnknownStrategy { kind: &'static str, name: String },

    #[error("invalid class path: {0}")]
    InvalidPath(String),

    #[error("partition overlap: {0}")]
    Overlap(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
