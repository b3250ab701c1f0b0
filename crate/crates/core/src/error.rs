use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("moment ({start}, {end}) lies outside the video span [0, {duration}]")]
    MomentOutOfRange { start: f64, end: f64, duration: f64 },
    #[error("degenerate moment: start {0} must be strictly less than end {1}")]
    DegenerateMoment(f64, f64),
    #[error("scale coverage violated: anchors {anchors} * 2^{k_max} < {n} segments")]
    CoverageViolation { anchors: usize, k_max: usize, n: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("schedule inconsistent at step {t}: 1 - alpha_bar[{prev}] - sigma^2 < 0")]
    ScheduleInconsistent { t: usize, prev: usize },
    #[error("empty step subsequence")]
    EmptySubsequence,
    #[error("empty result set")]
    EmptyResultSet,
    #[error("non-finite loss at step {step}: {loss} (lr {lr})")]
    NonFiniteLoss { step: usize, loss: f64, lr: f64 },
    #[error("checkpoint/config mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
