use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid probability: {0}")]
    InvalidProbability(String),

    #[error("matrix is not row-stochastic: row {row} sums to {sum}")]
    NotStochastic { row: usize, sum: f64 },

    #[error("annotation out of range at row {row}, column {col}: {value} (classes: {classes})")]
    AnnotationRange { row: usize, col: usize, value: i64, classes: usize },

    #[error("training instance {0} has no annotations")]
    EmptyAnnotationRow(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("true labels are required for {0}")]
    MissingLabels(&'static str),

    #[error("annotator {0} has no annotations")]
    EmptyAnnotator(usize),

    #[error("training diverged: non-finite loss at epoch {epoch} (learning rate {learning_rate})")]
    Diverged { epoch: usize, learning_rate: f64 },

    #[error("bisection did not converge after {0} steps")]
    NoConvergence(usize),

    #[error("bound is vacuous: every F term is non-positive")]
    VacuousBound,

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidProbability(_) => "invalid_probability",
            Error::NotStochastic { .. } => "not_stochastic",
            Error::AnnotationRange { .. } => "annotation_range",
            Error::EmptyAnnotationRow(_) => "empty_annotation_row",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::MissingLabels(_) => "missing_labels",
            Error::EmptyAnnotator(_) => "empty_annotator",
            Error::Diverged { .. } => "diverged",
            Error::NoConvergence(_) => "no_convergence",
            Error::VacuousBound => "vacuous_bound",
            Error::UnknownMethod(_) => "unknown_method",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
