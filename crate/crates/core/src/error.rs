use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("bridge corruption from t={t} by {t_fwd} is undefined")]
    InvalidBridge { t: f64, t_fwd: f64 },

    #[error("index {index} out of range for sequence of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("sequence of length {len} does not fit in {max_len}")]
    Overflow { len: usize, max_len: usize },

    #[error("enumeration of {task} exceeds the cap of {cap} completions")]
    EnumerationCap { task: String, cap: usize },

    #[error("evidence contradicts every completion of the prompt")]
    ContradictoryEvidence,

    #[error("invalid prompt for task {task}: {reason}")]
    InvalidPrompt { task: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("denoiser is frozen; parameters are immutable")]
    Frozen,

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("could not construct a sample after {retries} retries")]
    SampleRejected { retries: usize },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
