use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("episode finished")]
    EpisodeFinished,

    #[error("no background frames in {0}")]
    NoBackgroundFrames(PathBuf),

    #[error("cannot read image {path}: {reason}")]
    ImageRead { path: PathBuf, reason: String },

    #[error("malformed episode: {0}")]
    MalformedEpisode(String),

    #[error("no eligible sequence of length {0}")]
    NoEligibleSequence(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("wrong branch: expected {expected}, got {got}")]
    WrongBranch { expected: &'static str, got: &'static str },

    #[error("invalid belief: {0}")]
    InvalidBelief(String),

    #[error("no episodes requested")]
    NoEpisodesRequested,

    #[error("reward history is empty")]
    EmptyHistory,

    #[error("window too short: {got} records (need at least {need})")]
    WindowTooShort { got: usize, need: usize },

    #[error("diverged at step {step}: {term} is not finite")]
    Diverged { step: u64, term: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint parameter block `{name}`: {reason}")]
    ParameterBlock { name: String, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("metrics log schema mismatch: {0}")]
    Schema(String),

    #[error("episode file: {0}")]
    EpisodeFile(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
