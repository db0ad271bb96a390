use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid instruction: target {target_id} is not in the scene")]
    InvalidInstruction { target_id: usize },

    #[error("episode is over (step {step} of {horizon})")]
    EpisodeOver { step: u32, horizon: u32 },

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("permutation does not match the scene: {0}")]
    Permutation(String),

    #[error("placement failed for seed {seed}: {reason}")]
    PlacementFailure { seed: u64, reason: String },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("non-finite loss at {0}")]
    NonFiniteLoss(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("truncated trajectory: step {step} of {horizon}")]
    Truncated { step: u32, horizon: u32 },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("episode {0} rejected by success filter")]
    RejectedByFilter(u64),

    #[error("config hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("payload of {0} bytes exceeds the 1 MiB frame limit")]
    Oversize(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
