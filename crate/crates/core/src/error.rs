use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("design matrix is rank deficient: rank {rank}, expected {expected}")]
    RankDeficient { rank: usize, expected: usize },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("normal equations are singular")]
    SingularSystem,

    #[error("initial weight w_00 is zero")]
    ZeroInitialWeight,

    #[error("euler step {step} exceeds stability bound {bound}")]
    UnstableStep { step: f64, bound: f64 },

    #[error("training loss increased at euler step {step}: {before} -> {after}")]
    LossIncreased {
        step: usize,
        before: f64,
        after: f64,
    },

    #[error("need at least 2 bound reports, got {0}")]
    InsufficientRounds(usize),

    #[error("batch mode does not match model mode")]
    ModeMismatch,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("subsample size {n} is smaller than class count {classes}")]
    SubsampleTooSmall { n: usize, classes: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
