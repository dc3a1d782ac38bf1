use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("KL divergence undefined: q[{index}] = 0 while p[{index}] = {p}")]
    AbsoluteContinuityViolation { index: usize, p: f64 },

    #[error("distribution on the simplex boundary: {0}")]
    BoundaryDistribution(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("duplicate annotation for item {item:?} by annotator {annotator:?}")]
    DuplicateAnnotation { item: String, annotator: String },

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("item {0:?} has no annotations")]
    NoAnnotations(String),

    #[error("tie between labels {labels:?} for item {item:?}")]
    Tie { item: String, labels: Vec<usize> },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("label space mismatch: {0}")]
    LabelSpaceMismatch(String),

    #[error("unknown annotator {0:?}")]
    UnknownAnnotator(String),

    #[error("constant series: Pearson correlation undefined")]
    ConstantSeries,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// True for errors caused by malformed or misaligned input rather than
    /// by numerical failure of a fit.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::DegenerateInput(_) | Error::NonFinite(_) | Error::BoundaryDistribution(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
