use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("unsupported channel count: {0} (mono only)")]
    UnsupportedChannelCount(u16),
    #[error("signal of {len} samples is shorter than one frame ({frame_len})")]
    SignalTooShort { len: usize, frame_len: usize },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid distribution parameters: {0}")]
    InvalidParams(String),
    #[error("degenerate covariance: {0}")]
    Degenerate(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("silent input: {0}")]
    SilentInput(String),
    #[error("batch normalization has no running statistics yet: {0}")]
    MissingRunningStats(String),
    #[error("missing {0} checkpoint")]
    MissingCheckpoint(String),
    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("non-finite loss at step {step} of stage {stage}: {detail}")]
    NonFinite { stage: u8, step: usize, detail: String },
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
    #[error("oracle mode needs the clean reference")]
    MissingReference,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
