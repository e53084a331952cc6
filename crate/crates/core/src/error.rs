//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by schedule construction, distribution math, denoisers,
/// decoding, the toy channel, and persistence.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A constructor or operation received an argument outside its domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A timestep index fell outside the schedule range.
    #[error("timestep {t} out of range {min}..={max}")]
    StepOutOfRange { t: usize, min: usize, max: usize },

    /// Two tensors or sequences that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A documented data invariant does not hold (e.g. unnormalized rows).
    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    /// Conditioning frames cannot be aligned with the token sequence.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// A transcript contains a symbol outside the alphabet.
    #[error("encoding error: {0}")]
    Encoding(String),

    /// Training produced a non-finite loss or gradient.
    #[error("training error: {0}")]
    Training(String),

    /// A rate has no defined value (e.g. empty reference).
    #[error("undefined rate: {0}")]
    UndefinedRate(String),

    /// Checkpoint magic or version tag not recognized.
    #[error("checkpoint version error: {0}")]
    CheckpointVersion(String),

    /// Checkpoint tensor shapes disagree with the stored config.
    #[error("checkpoint shape error: {0}")]
    CheckpointShape(String),

    /// Checkpoint payload shorter or longer than the header promises.
    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
