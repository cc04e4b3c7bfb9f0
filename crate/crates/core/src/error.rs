use thiserror::Error;

/// Errors produced anywhere in the model-building, inference and selection pipeline.
#[derive(Debug, Error)]
pub enum StjmError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid adjacency graph: {0}")]
    InvalidGraph(String),
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("degenerate full conditional: area {area} has no neighbours")]
    DegenerateConditional { area: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("model specification error: {0}")]
    Model(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("zero-variance covariate `{0}`")]
    ZeroVariance(String),
    #[error("Newton iterations did not converge after {iterations} steps (last max |step| = {last_step:e})")]
    NonConvergence {
        iterations: usize,
        last_step: f64,
        trace: Vec<f64>,
    },
    #[error("optimisation failed: {0}")]
    Optimisation(String),
    #[error("no loans at risk at t = {0}")]
    NoneAtRisk(usize),
    #[error("loan {loan} is not at risk at t = {t}")]
    NotAtRisk { loan: usize, t: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("serialisation error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, StjmError>;
