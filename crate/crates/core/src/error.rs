use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("beta = {beta} exceeds the admissible bound d/(d+2) = {bound} for d = {dim}")]
    BetaOutOfRange { beta: f64, bound: f64, dim: usize },

    #[error("grid with M = {m} is too coarse for kernel support half-width {half_width} (need h <= {max_h})")]
    GridTooCoarse { m: usize, half_width: f64, max_h: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("solver unstable at t = {time}, step {step}: {reason}")]
    Unstable { time: f64, step: u64, reason: String },

    #[error("simulation failed at t = {time}, step {step}: {source}")]
    Step {
        time: f64,
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("study failed: {0}")]
    Study(String),

    #[error("config: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
