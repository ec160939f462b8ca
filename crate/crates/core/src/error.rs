use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite vector")]
    NonFinite,
    #[error("undefined cosine: zero-norm input")]
    UndefinedCosine,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("power iteration did not converge in {iterations} iterations (last estimate {last_estimate})")]
    NotConverged { iterations: usize, last_estimate: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: input has {actual} entries, layer expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("hessian too large: {params} parameters exceeds cap {cap}")]
    HessianTooLarge { params: usize, cap: usize },
    #[error("non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("insufficient checkpoints: need {needed}, have {available}")]
    InsufficientCheckpoints { needed: usize, available: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("fit needs at least 2 usable points, got {0}")]
    TooFewPoints(usize),
    #[error("dataset violates its input bound: sample {index} has norm {norm} > {bound}")]
    BoundViolated { index: usize, norm: f64, bound: f64 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
