use thiserror::Error;

use crate::certification::CertificationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for `{operand}`: expected {expected}, found {found}")]
    Dimension {
        operand: String,
        expected: String,
        found: String,
    },

    #[error("unbounded lower slope: cannot shift a nonlinearity with slope_lo = -inf")]
    UnboundedLowerSlope,

    #[error("input provider failed at step {step}: {message}")]
    Provider { step: usize, message: String },

    #[error("matrix `{name}` is not symmetric (max deviation {deviation:e})")]
    Asymmetric { name: String, deviation: f64 },

    #[error("matrix `{name}` is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { name: String, min_eigenvalue: f64 },

    #[error("noise dimension mismatch: concrete s = {concrete}, abstract s = {abstract_}")]
    NoiseDimension { concrete: usize, abstract_: usize },

    #[error("independent noise coupling cannot be used for certification")]
    IndependentCoupling,

    #[error("missing matrices: {}", .0.join(", "))]
    MissingMatrices(Vec<String>),

    #[error("missing compositionality evidence for subsystem {0}")]
    MissingEvidence(usize),

    #[error("compositionality check failed for subsystem {0}")]
    CompositionalityFailed(usize),

    #[error("horizon mismatch: {0}")]
    Horizon(String),

    #[error("resource cap exceeded: estimated {estimated_bytes} bytes, cap {cap_bytes} bytes")]
    ResourceCap { estimated_bytes: u64, cap_bytes: u64 },

    #[error("certification failed: {}", .0.failed_conditions().join(", "))]
    CertificationFailed(Box<CertificationReport>),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn dim(operand: &str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            operand: operand.to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
