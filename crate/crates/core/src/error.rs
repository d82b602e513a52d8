use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("tensor extents must be positive and match data length (shape {shape:?}, {len} values)")]
    Layout { shape: [usize; 2], len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: argument outside the domain of the function")]
    Domain { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: [usize; 2] },
    #[error("{op}: {reason}")]
    Contract { op: &'static str, reason: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("objective unbounded along direction {direction:?}")]
    Unbounded { direction: Vec<f64> },
    #[error("simplex exceeded {0} pivots")]
    IterationLimit(usize),
    #[error("solution failed feasibility re-check: {0}")]
    Infeasible(String),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Invalid(String),
    #[error("class {class} is short by {shortfall} samples")]
    InsufficientClass { class: usize, shortfall: usize },
    #[error("class {class} rounds to zero samples")]
    EmptyClass { class: usize },
    #[error("bad magic number {found:#010x} in {path}")]
    BadMagic { path: PathBuf, found: u32 },
    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("label {label} out of range (< {classes}) in {path}")]
    LabelOutOfRange {
        path: PathBuf,
        label: usize,
        classes: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite {term} at step {step}")]
    NonFiniteLoss { step: usize, term: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
