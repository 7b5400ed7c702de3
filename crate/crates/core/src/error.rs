use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("round {round}, client {client_id}: {source}")]
    Client {
        round: usize,
        client_id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sweep cell (clients={clients}, alpha={alpha}, seed_index={seed_index}): {source}")]
    Cell {
        clients: usize,
        alpha: f64,
        seed_index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::Checkpoint(e) => e.kind(),
            Error::Client { .. } => "client_failure",
            Error::Cell { .. } => "sweep_cell",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

/// Failures while decoding the binary adapter checkpoint format.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"FUMM\", found {0:02x?}")]
    BadMagic([u8; 4]),

    #[error("version mismatch: file has version {found}, reader supports {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("dim overflow in tensor {name:?}: {detail}")]
    DimOverflow { name: String, detail: String },

    #[error("tensor name at offset {0} is not valid UTF-8")]
    InvalidName(usize),

    #[error("tensor {0:?} contains a non-finite value")]
    NonFinite(String),

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),

    #[error("checkpoint does not match the adapter layout: {0}")]
    Layout(String),
}

impl CheckpointError {
    pub fn kind(&self) -> &'static str {
        match self {
            CheckpointError::BadMagic(_) => "bad_magic",
            CheckpointError::VersionMismatch { .. } => "version_mismatch",
            CheckpointError::Truncated { .. } => "truncated",
            CheckpointError::DimOverflow { .. } => "dim_overflow",
            CheckpointError::InvalidName(_) => "invalid_name",
            CheckpointError::NonFinite(_) => "non_finite",
            CheckpointError::DuplicateName(_) => "duplicate_name",
            CheckpointError::TrailingBytes(_) => "trailing_bytes",
            CheckpointError::Layout(_) => "layout",
        }
    }
}
