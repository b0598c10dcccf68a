//! Error type shared by every module of the crate.

use std::fmt;

use crate::svm::SvmSolution;

/// Coarse grouping used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Domain,
    Dimension,
    Numerical,
    Data,
    Config,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Domain => 3,
            ErrorCategory::Dimension => 4,
            ErrorCategory::Numerical => 5,
            ErrorCategory::Data => 6,
            ErrorCategory::Config => 7,
            ErrorCategory::Io => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Domain => "domain",
            ErrorCategory::Dimension => "dimension",
            ErrorCategory::Numerical => "numerical",
            ErrorCategory::Data => "data",
            ErrorCategory::Config => "config",
            ErrorCategory::Io => "io",
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A scalar or structural argument is outside the operation's domain.
    #[error("invalid argument: {0}")]
    Domain(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix is not positive definite: eigenvalue #{index} = {eigenvalue:e}")]
    NotPositiveDefinite { index: usize, eigenvalue: f64 },

    #[error("matrix is not symmetric: max asymmetry {asymmetry:e}")]
    NotSymmetric { asymmetry: f64 },

    #[error("exact induced norm needs 2^{p} sign patterns; p > {max} (use the upper bound)")]
    NormTooLarge { p: usize, max: usize },

    #[error("svm solver stopped after {iterations} iterations with KKT residual {residual:e}")]
    SolverNotConverged {
        iterations: usize,
        residual: f64,
        best: Box<SvmSolution>,
    },

    #[error("quadrature did not reach tolerance: achieved error estimate {achieved:e}")]
    Quadrature { achieved: f64 },

    #[error("density integrates to {mass} instead of 1")]
    NotNormalized { mass: f64 },

    #[error("eigen solver failure: {0}")]
    Eigen(String),

    #[error("grid of {grid_points} points too coarse: residual {achieved:e} above {target:e}")]
    GridTooCoarse {
        grid_points: usize,
        achieved: f64,
        target: f64,
    },

    #[error("null space of the invariance operator is trivial (q = {q}, p = {p}); use more rows or fewer features")]
    TrivialNullSpace { q: usize, p: usize },

    #[error("ill-conditioned Hessian (condition number {condition:e})")]
    IllConditioned { condition: f64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("trial {trial} failed: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Domain(_) | Error::NormTooLarge { .. } | Error::TrivialNullSpace { .. } => {
                ErrorCategory::Domain
            }
            Error::Dimension { .. } => ErrorCategory::Dimension,
            Error::NotPositiveDefinite { .. }
            | Error::NotSymmetric { .. }
            | Error::SolverNotConverged { .. }
            | Error::Quadrature { .. }
            | Error::NotNormalized { .. }
            | Error::Eigen(_)
            | Error::GridTooCoarse { .. }
            | Error::IllConditioned { .. } => ErrorCategory::Numerical,
            Error::Data(_) | Error::Csv(_) => ErrorCategory::Data,
            Error::Config(_) => ErrorCategory::Config,
            Error::Io(_) => ErrorCategory::Io,
            Error::Trial { source, .. } => source.category(),
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, found: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            found,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
