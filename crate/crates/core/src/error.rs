use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure classes; the CLI maps them onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl ErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Numerical => "numerical",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },

    #[error("line {line}: non-positive close {value}")]
    NonPositivePrice { line: usize, value: f64 },

    #[error("duplicate date {0}")]
    DuplicateDate(NaiveDate),

    #[error("need at least {required} observations, found {found}")]
    TooFewObservations { found: usize, required: usize },

    #[error("window [{start}, {end}] selects no observations")]
    EmptySelection { start: NaiveDate, end: NaiveDate },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("block length {block_len} exceeds source length {len}")]
    BlockTooLong { block_len: usize, len: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("too few exceedances above threshold: found {found}, need {required}")]
    TooFewExceedances { found: usize, required: usize },

    #[error("too few complete blocks: found {found}, need {required}")]
    TooFewBlocks { found: usize, required: usize },

    #[error("optimizer did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("shape parameter {0} >= 1 gives an infinite-mean tail")]
    InfiniteMean(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("portfolio has zero initial value")]
    ZeroValue,

    #[error("insufficient history: need {required} observations before {date}, have {available}")]
    InsufficientHistory { date: NaiveDate, required: usize, available: usize },

    #[error("date misalignment: {0}")]
    DateMisalignment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) | Error::Json(_) => ErrorKind::Config,
            Error::NonConvergence { .. } | Error::InfiniteMean(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}
