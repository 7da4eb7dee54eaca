//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("degenerate vector: norm below {0:e}")]
    DegenerateVector(f64),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("label {label} outside the declared range 0..{limit}")]
    LabelOutOfRange { label: u32, limit: u32 },

    #[error("flag field {field} holds {value}, expected 0 or 1")]
    InvalidFlag { field: &'static str, value: u8 },

    #[error("label {0} is outside the expert's class scope")]
    LabelOutsideScope(u32),

    #[error("class {0} has no samples")]
    EmptyClass(u32),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("prototype pool is empty")]
    EmptyPool,

    #[error("class {0} already present in the prototype pool")]
    DuplicateClass(u32),

    #[error("expert {0} has not been trained")]
    UntrainedExpert(u32),

    #[error("no experts available")]
    NoExperts,

    #[error("{classes} classes cannot be split as B{base}-Inc{increment}")]
    UnevenSplit {
        classes: usize,
        base: usize,
        increment: usize,
    },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable identifier for each failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::DegenerateVector(_) => "degenerate_vector",
            Error::NonFinite(_) => "non_finite",
            Error::Invalid(_) => "invalid_config",
            Error::BadMagic { .. } => "bad_magic",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Truncated(_) => "truncated_payload",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::InvalidFlag { .. } => "invalid_flag",
            Error::LabelOutsideScope(_) => "label_outside_scope",
            Error::EmptyClass(_) => "empty_class",
            Error::EmptyDataset => "empty_dataset",
            Error::EmptyPool => "empty_pool",
            Error::DuplicateClass(_) => "duplicate_class",
            Error::UntrainedExpert(_) => "untrained_expert",
            Error::NoExperts => "no_experts",
            Error::UnevenSplit { .. } => "uneven_split",
            Error::Metric(_) => "metric_undefined",
            Error::Invariant(_) => "invariant_violation",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code: 2 validation, 3 I/O, 4 internal invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_)
            | Error::Json(_)
            | Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated(_)
            | Error::InvalidFlag { .. }
            | Error::LabelOutOfRange { .. } => 3,
            Error::Invariant(_) | Error::NonFinite(_) | Error::DegenerateVector(_) => 4,
            _ => 2,
        }
    }
}
