use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("tape misuse: {0}")]
    Tape(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("cache incoherent for sample {sample_id}: stored {stored}, recomputed {recomputed}")]
    CacheIncoherent {
        sample_id: u64,
        stored: f32,
        recomputed: f32,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
