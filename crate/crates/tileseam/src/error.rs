use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// everything here is a data/format/geometry error (exit 2); usage errors
/// are handled by the argument parser and diagnostic failures by the
/// `--assert-seamless` gate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("data: {0}")]
    Data(String),

    #[error("npy: {0}")]
    Npy(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
