use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid head dimension {0}: must be a positive even integer")]
    InvalidDimension(usize),

    #[error("invalid rotary base {0}: must be positive and finite")]
    InvalidBase(f64),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("invalid extension: {0}")]
    InvalidExtension(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("sample `{0}` not found")]
    MissingSample(String),

    #[error("chatml parse error at byte {offset}: {reason}")]
    ChatmlParse { offset: usize, reason: String },
}
