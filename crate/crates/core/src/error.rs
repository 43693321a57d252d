use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("x = {x} lies outside the basis support [{lo}, {hi}]")]
    OutOfSupport { x: f64, lo: f64, hi: f64 },

    #[error("invalid basis specification: {0}")]
    BasisSpec(String),

    #[error("design matrix is singular (minimum eigenvalue {min_eigenvalue:.3e} below floor {floor:.1e}); use fewer knots")]
    SingularDesign { min_eigenvalue: f64, floor: f64 },

    #[error("solver diverged: |coef|_1 = {l1_norm:.3e} exceeded the cap {cap:.1e} after {iterations} iterations (objective unbounded for lambda = {lambda:.3e})")]
    Diverged {
        l1_norm: f64,
        cap: f64,
        iterations: usize,
        lambda: f64,
    },

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("penalty selection failed: {0}")]
    Selection(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("intercept calibration failed: {0}")]
    Calibration(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    /// True for errors caused by the input data rather than the computation.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Schema(_) | Error::Parse { .. } | Error::Validation(_)
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Schema(_) => "schema",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::OutOfSupport { .. } => "out_of_support",
            Error::BasisSpec(_) => "basis_spec",
            Error::SingularDesign { .. } => "singular_design",
            Error::Diverged { .. } => "diverged",
            Error::Degenerate(_) => "degenerate",
            Error::Selection(_) => "selection",
            Error::Numerical(_) => "numerical",
            Error::Calibration(_) => "calibration",
            Error::Config(_) => "config",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
