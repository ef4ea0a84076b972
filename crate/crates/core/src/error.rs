use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("segment {0} has no members")]
    EmptySegment(usize),

    #[error("segment id {id} out of range for {n_segments} segments")]
    SegmentOutOfRange { id: usize, n_segments: usize },

    #[error("row {0} of the target is not a valid one-hot vector")]
    InvalidOneHot(usize),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error(transparent)]
    Smiles(#[from] crate::smiles::SmilesError),

    #[error("layer index {index} out of range for {layers} layers")]
    LayerOutOfRange { index: usize, layers: usize },

    #[error("support set is empty")]
    EmptySupport,

    #[error("query set is empty")]
    EmptyQuery,

    #[error("expected {expected} layer predictions, got {got}")]
    LayerCount { expected: usize, got: usize },

    #[error("non-finite loss {value} ({context})")]
    NonFinite { value: f64, context: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("task {task}: {message}")]
    Sampling { task: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("duplicate task id {0}")]
    DuplicateTask(String),

    #[error("registry is empty")]
    EmptyRegistry,

    #[error("task {0} has a zero task vector; cosine similarity is undefined")]
    ZeroTaskVector(String),

    #[error("{0}")]
    Metric(String),

    #[error("task relation: {0}")]
    Relation(String),
}
