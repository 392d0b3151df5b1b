use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: u32 },

    #[error("non-finite component in vector {index}")]
    NonFinite { index: usize },

    #[error("empty datastore")]
    EmptyDatastore,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("truncated file: needed {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },

    #[error("degenerate vector (zero norm)")]
    DegenerateVector,

    #[error("degenerate projection (norm below threshold)")]
    DegenerateProjection,

    #[error("anchor {anchor} has no other member in its cluster")]
    UnsampleableAnchor { anchor: usize },

    #[error("need {required} candidate clusters for negatives, only {available} available")]
    InsufficientClusters { available: usize, required: usize },

    #[error("too few samples: {count} (need at least {required})")]
    TooFewSamples { count: usize, required: usize },

    #[error("score {0} outside [-1, 1]")]
    ScoreOutOfRange(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
