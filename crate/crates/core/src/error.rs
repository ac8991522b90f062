use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid mismatch: {left} nodes vs {right} nodes")]
    GridMismatch { left: usize, right: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite value at node {node}")]
    NonFinite { node: usize },

    #[error("wall violation at node {node}: value {value} outside [{lower}, {upper}]")]
    WallViolation {
        node: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("empty path")]
    EmptyPath,

    #[error("misaligned paths: {0}")]
    Misaligned(String),

    #[error("seed mismatch: record was produced with {expected}, got {actual}")]
    SeedMismatch { expected: String, actual: String },

    #[error("numerical blow-up at step {step} (t = {time})")]
    BlowUp { step: usize, time: f64 },

    #[error("coupled pair lost ordering at step {step}: min(u - v) = {gap}")]
    OrderingViolated { step: usize, gap: f64 },

    #[error("diffusion coefficient {value} at state {state} is below the required bound {bound}")]
    DiffusionBound { state: f64, value: f64, bound: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
