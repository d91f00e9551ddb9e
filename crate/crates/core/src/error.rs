use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("label {label} out of range for {n_classes} classes")]
    InvalidLabel { label: usize, n_classes: usize },

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("record `{id}` has no label")]
    MissingLabel { id: String },

    #[error("record `{id}` has {found} classes, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("alpha must lie strictly between 0 and 1, got {0}")]
    InvalidAlpha(f64),

    #[error("record `{id}`: {reason}")]
    Validation { id: String, reason: String },

    #[error("prediction set `{set_id}` does not match record `{record_id}`")]
    Alignment { set_id: String, record_id: String },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("need at least 2 classes, got {0}")]
    InvalidClassCount(usize),

    #[error("chance agreement is 1; kappa is undefined")]
    DegenerateAgreement,

    #[error("no examples to evaluate")]
    EmptyInput,

    #[error("max set size must be at least 1")]
    InvalidMaxSetSize,

    #[error("group `{group}` has {size} calibration examples, need at least {min}")]
    GroupTooSmall {
        group: String,
        size: usize,
        min: usize,
    },

    #[error("record `{id}` has no value for group attribute `{attribute}`")]
    MissingGroup { id: String, attribute: String },

    #[error("no calibration model for group `{group}`")]
    UnknownGroup { group: String },

    #[error("permutation test needs two non-empty samples")]
    EmptySample,

    #[error("n_permutations must be at least 1")]
    InvalidPermutations,

    #[error("reports are not comparable: {0}")]
    IncomparableReports(String),

    #[error("alpha sweep needs at least one alpha")]
    EmptyAlphas,

    #[error("class priors are not a valid simplex: {0}")]
    InvalidPriors(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {msg}", path = path.display())]
    Format {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("duplicate id `{id}` at line {line}")]
    DuplicateId { id: String, line: u64 },

    #[error("{path}: {source}", path = path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable category name, printed by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidLabel { .. } => "InvalidLabel",
            Error::EmptyCalibration => "EmptyCalibration",
            Error::MissingLabel { .. } => "MissingLabel",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::InvalidAlpha(_) => "InvalidAlpha",
            Error::Validation { .. } => "ValidationError",
            Error::Alignment { .. } | Error::LengthMismatch { .. } => "AlignmentError",
            Error::InvalidClassCount(_) => "InvalidClassCount",
            Error::DegenerateAgreement => "DegenerateAgreement",
            Error::EmptyInput => "EmptyInput",
            Error::InvalidMaxSetSize => "InvalidMaxSetSize",
            Error::GroupTooSmall { .. } => "GroupTooSmall",
            Error::MissingGroup { .. } => "MissingGroup",
            Error::UnknownGroup { .. } => "UnknownGroup",
            Error::EmptySample => "EmptySample",
            Error::InvalidPermutations => "InvalidPermutations",
            Error::IncomparableReports(_) => "IncomparableReports",
            Error::EmptyAlphas => "EmptyAlphas",
            Error::InvalidPriors(_) => "InvalidPriors",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Format { .. } => "FormatError",
            Error::DuplicateId { .. } => "DuplicateId",
            Error::Io { .. } => "IoError",
            Error::Json(_) => "JsonError",
            Error::Csv(_) => "CsvError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
