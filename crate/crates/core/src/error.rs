use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the design pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} outside admissible range {range}")]
    Domain {
        what: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("linear solve did not converge: relative residual {residual:e} after {iterations} iterations")]
    SolveNotConverged { residual: f64, iterations: usize },

    #[error("defect budget infeasible: {0}")]
    InfeasibleBudget(String),

    #[error("inner solver stopped after {iterations} Newton steps with KKT residual {residual:e}")]
    InnerMaxIterations {
        iterations: usize,
        residual: f64,
        best: Box<crate::inner::InnerSolution>,
    },

    #[error("inner solution not converged (KKT residual {0:e})")]
    Unconverged(f64),

    #[error("MMA dual bracket failure: {0}")]
    DualBracket(String),

    #[error("outer iteration {iteration}: {source}")]
    Outer {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("config validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("malformed density file {path}: {msg}")]
    DensityFormat { path: String, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
