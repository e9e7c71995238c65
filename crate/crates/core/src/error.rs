use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sparsity budget infeasible: {0}")]
    BudgetInfeasible(String),
    #[error("layer {layer}: asked for {requested} positions but only {available} are available")]
    CountExceeds {
        layer: usize,
        requested: usize,
        available: usize,
    },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("parameter fraction {0} unreachable with at least one channel per layer")]
    Unreachable(f64),
}

pub type Result<T> = std::result::Result<T, Error>;
