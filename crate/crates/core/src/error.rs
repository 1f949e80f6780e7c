use thiserror::Error;

/// Errors produced by the clustering pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("forward trace was produced by different parameters")]
    StaleTrace,

    #[error("a batch needs at least 2 samples, got {0}")]
    InsufficientBatch(usize),

    #[error("shard is empty")]
    EmptyShard,

    #[error("codebooks have incompatible code lengths: {0} vs {1}")]
    IncompatibleCodebooks(usize, usize),

    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("brute-force oracle supports at most {max} vertices, got {got}")]
    OracleSize { max: usize, got: usize },

    #[error("invalid cluster count k={k} for {vertices} vertices")]
    InvalidK { k: usize, vertices: usize },

    #[error("unsupported size: {0}")]
    UnsupportedSize(String),

    #[error("inconsistent state: {0}")]
    InconsistentState(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("empty input")]
    EmptyInput,

    #[error("invalid cluster spec: {0}")]
    InvalidClusterSpec(String),

    #[error("cannot shard {samples} samples into {sites} sites with at least {min_per_site} each")]
    InfeasibleShard {
        samples: usize,
        sites: usize,
        min_per_site: usize,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
