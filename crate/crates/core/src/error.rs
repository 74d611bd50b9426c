use std::path::PathBuf;

/// Errors produced by the library.
///
/// The variants split into two families: problems with caller-supplied data
/// (parse errors, invariant violations, shape mismatches) and I/O or internal
/// failures. [`Error::is_input_error`] tells them apart.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("duplicate id {id:?}")]
    DuplicateId { id: String },

    #[error("non-positive duration at row {row}")]
    NonPositiveDuration { row: usize },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("alignment does not cover the score: {0}")]
    Alignment(String),

    #[error("malformed MIDI file: {0}")]
    Midi(String),

    #[error("insufficient onsets for beat period")]
    InsufficientOnsets,

    #[error("non-positive beat period at note {note_id:?}")]
    NonPositiveBeatPeriod { note_id: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("step {t} out of range [1, {max}]")]
    StepOutOfRange { t: usize, max: usize },

    #[error("mismatched score segments")]
    MismatchedSegments,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("degenerate sample for {attribute}: zero variance")]
    DegenerateSample { attribute: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True when the error stems from bad input data rather than the
    /// environment (I/O) or an internal fault.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Json(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
