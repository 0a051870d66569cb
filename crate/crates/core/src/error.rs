use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("gradient root must be scalar")]
    NonScalarRoot,

    #[error("invalid node id {0}")]
    UnknownNode(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("branch index {index} out of range for {branches} branches")]
    BranchIndex { index: usize, branches: usize },

    #[error("class index {class} out of range for {classes} classes")]
    ClassIndex { class: usize, classes: usize },

    #[error("non-finite loss at perturbed coordinate {coordinate}")]
    NonFiniteAtCoordinate { coordinate: usize },

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("parameter count {count} exceeds the dense Hessian limit {limit}")]
    TooManyParameters { count: usize, limit: usize },

    #[error("non-finite Hessian entry in column {column}")]
    NonFiniteHessian { column: usize },

    #[error("internal consistency check failed: {0}")]
    Inconsistent(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
