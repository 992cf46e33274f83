use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("mode index {index} outside 1..={points}")]
    ModeOutOfRange { index: usize, points: usize },

    #[error("field has {got} values, domain has {expected} interior points")]
    LengthMismatch { expected: usize, got: usize },

    #[error("singular tridiagonal system: pivot {pivot:e} at row {row}")]
    SingularSystem { row: usize, pivot: f64 },

    #[error("inverse of g did not converge for y = {y} after {iterations} iterations")]
    InverseNoConvergence { y: f64, iterations: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empirical measures live on different domains")]
    DomainMismatch,

    #[error("cost matrix is {rows}x{cols}, expected square")]
    NonSquare { rows: usize, cols: usize },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("step {step}: {source}")]
    Step { step: usize, source: Box<Error> },

    #[error("degenerate fit window: {0}")]
    DegenerateFit(String),

    #[error("model does not satisfy the standing hypotheses: {0}")]
    Nonconforming(String),

    #[error("config: {0}")]
    Config(String),

    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
