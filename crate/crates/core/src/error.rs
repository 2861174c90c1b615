use thiserror::Error;

/// Errors shared across the library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("query at t = {t} lies outside the represented horizon {horizon}")]
    Horizon { t: f64, horizon: f64 },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("parse error at {line}:{col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },

    #[error("problem schema: {0}")]
    Schema(String),

    #[error("unknown control label `{0}`")]
    UnknownControl(String),

    #[error("expression evaluation: {0}")]
    Eval(String),

    #[error("mark kernel weights sum to zero at t = {t}")]
    DegenerateKernel { t: f64 },

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("flow diverged (non-finite state) at t = {t}")]
    Divergence { t: f64 },

    #[error("stage cap {cap} exceeded (seed {seed}); intensity likely misdeclared")]
    Runaway { cap: usize, seed: u64 },

    #[error("interval {interval} did not contract within {iterations} iterations (residual {residual:.3e})")]
    NonContraction {
        interval: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("enumeration budget exceeded: {0}")]
    Budget(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
