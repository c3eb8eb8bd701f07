//! Crate-level error type shared by the estimation pipeline.

use thiserror::Error;

use crate::design::DesignError;
use crate::learners::LearnerError;
use crate::matrixkit::MatrixError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("degenerate stratum '{stratum}': {detail}")]
    DegenerateStratum { stratum: String, detail: String },
    #[error("solver did not converge after {iterations} iterations (gradient norm {residual:e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        lambda: Vec<f64>,
    },
    #[error("no feasible step along the Newton direction at iteration {iteration}")]
    InfeasibleDirection { iteration: usize, lambda: Vec<f64> },
    #[error("stratum '{stratum}' has n = {n} but rank estimate {rank} leaves no degrees of freedom")]
    InsufficientDf { stratum: String, n: usize, rank: usize },
    #[error("non-positive total variance: var_h = {var_h:e}, var_y = {var_y:e}, var_explained = {var_explained:e}")]
    NonPositiveVariance {
        var_h: f64,
        var_y: f64,
        var_explained: f64,
    },
    #[error("{0}")]
    Io(String),
    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Design(#[from] DesignError),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
