use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: empty file")]
    EmptyFile { path: PathBuf },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: header does not match schema: {detail}")]
    HeaderMismatch { path: PathBuf, detail: String },
    #[error("{path}: line {line}: non-numeric cell `{cell}`")]
    NonNumericCell {
        path: PathBuf,
        line: u64,
        cell: String,
    },
    #[error("{path}: line {line}: bad timestamp `{cell}`")]
    BadTimestamp {
        path: PathBuf,
        line: u64,
        cell: String,
    },
    #[error("{path}: inconsistent horizon count: expected {expected}, found {found} at line {line}")]
    InconsistentHorizonCount {
        path: PathBuf,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {detail}")]
    MalformedTable { path: PathBuf, detail: String },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("need at least 2 forecast sequences, got {0}")]
    TooFewSequences(usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("transform has no fitted samples for coordinate {0}")]
    UnfittedTransform(usize),
    #[error("exponential profile fit is degenerate: {0}")]
    DegenerateFit(String),
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("correlation matrix is not positive definite even after shrinkage {0}")]
    SingularCorrelation(f64),
    #[error("flow is conditional but no conditioner was supplied (or vice versa)")]
    ConditionerMissing,
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("non-positive diagonal entry {0} in low-rank covariance")]
    NonPositiveDiagonal(f64),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    DivergedLoss { epoch: usize, loss: f64 },

    #[error("pseudo-observations cover {have} hours, need {need}")]
    CoverageGap { have: usize, need: usize },
    #[error("updates do not align with trajectory: {0}")]
    MisalignedUpdates(String),

    #[error("distance matrix is empty")]
    EmptyMatrix,
    #[error("need at least 2 scenarios, got {0}")]
    TooFewScenarios(usize),
    #[error("variogram score needs at least 2 areas")]
    SingleArea,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model artifact: {0}")]
    Artifact(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
