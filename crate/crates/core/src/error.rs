use thiserror::Error;

pub type Result<T> = std::result::Result<T, DscaError>;

#[derive(Debug, Error)]
pub enum DscaError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(String),

    #[error("concept set is empty")]
    EmptyConceptSet,

    #[error("concept set is frozen; assignment is not allowed")]
    Frozen,

    #[error("insufficient samples: need {needed}, have {found}")]
    InsufficientSamples { needed: usize, found: usize },

    #[error("degenerate covariance: requested rank {requested}, achievable rank {achievable}")]
    DegenerateCovariance { requested: usize, achievable: usize },

    #[error("concept {0} has no active subspace")]
    InactiveBasis(usize),

    #[error("unknown concept id {0}")]
    UnknownConcept(usize),

    #[error("class index {class} out of range for {num_classes} classes")]
    InvalidClass { class: usize, num_classes: usize },

    #[error("batch too small for {context}: need at least {needed}, have {found}")]
    BatchTooSmall {
        context: &'static str,
        needed: usize,
        found: usize,
    },

    #[error("unknown variant '{given}'; valid ids: {valid}")]
    UnknownVariant { given: String, valid: String },

    #[error("non-finite gradient in {tensor} of concept {concept} at flat index {index}")]
    NonFiniteGradient {
        concept: usize,
        tensor: &'static str,
        index: usize,
    },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("world mismatch: {0}")]
    WorldMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DscaError {
    pub fn config(msg: impl Into<String>) -> Self {
        DscaError::Config(msg.into())
    }
}
