use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("sequence of {len} tokens exceeds max length {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("position {position} out of range for sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown image: {0}")]
    UnknownImage(String),

    #[error("need at least 2 candidates, got {0}")]
    TooFewCandidates(usize),

    #[error("gold index {gold} out of range for {n} candidates")]
    GoldOutOfRange { gold: usize, n: usize },

    #[error("duplicate candidates after normalization: {0:?}")]
    DuplicateCandidates(String),

    #[error("instance {0} has no visual features")]
    MissingFeatures(String),

    #[error("no objective enabled")]
    NoObjective,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty evaluation set")]
    EmptyEvaluation,

    #[error("missing template for relation {0}")]
    MissingTemplate(String),

    #[error("distractor pool exhausted for {gold:?}: {eligible} of {needed} eligible after widening")]
    PoolExhausted { gold: String, eligible: usize, needed: usize },

    #[error("missing {kind} entry for {key:?}")]
    MissingEntry { kind: &'static str, key: String },

    #[error("caption already attached to instance {0}")]
    CaptionAlreadyAttached(String),

    #[error("duplicate id: {0}")]
    DuplicateId(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("strategy {0} is not configured")]
    UnconfiguredStrategy(&'static str),

    #[error("missing field {field} in record {record}")]
    MissingField { field: &'static str, record: String },

    #[error("non-finite loss at step {step}")]
    NumericalFailure { step: usize },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }

    /// Errors caused by a failed numerical computation rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NumericalFailure { .. } => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
