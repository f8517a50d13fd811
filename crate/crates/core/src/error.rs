use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("state enumeration needs {needed} states, cap is {cap}")]
    CapExceeded { needed: u128, cap: u128 },

    #[error("cannot step from terminal state {0}")]
    SteppedTerminal(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },

    #[error("invalid mdp: {0}")]
    InvalidMdp(String),

    #[error("reward {value} for {state} lies outside [{r_min}, {r_max}]")]
    RewardOutOfBounds {
        state: String,
        value: f64,
        r_min: f64,
        r_max: f64,
    },

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("discount is zero but an unsupported branch was reached at state {0}")]
    GammaZero(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty partition: no {0} pairs")]
    EmptyPartition(&'static str),

    #[error("run logs do not share a step grid: {0}")]
    GridMismatch(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
