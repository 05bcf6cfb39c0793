use thiserror::Error;

/// Failure categories surfaced by the engine. The CLI maps each category to
/// a distinct exit code.
#[derive(Debug, Error)]
pub enum GmmtError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl GmmtError {
    pub fn config(msg: impl Into<String>) -> Self {
        GmmtError::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        GmmtError::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        GmmtError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        GmmtError::Numeric(msg.into())
    }

    /// Process exit code: 2 configuration, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            GmmtError::Config(_) | GmmtError::Shape(_) => 2,
            GmmtError::Data(_) | GmmtError::Checksum { .. } | GmmtError::Version { .. } | GmmtError::Io(_) => 3,
            GmmtError::Numeric(_) => 4,
        }
    }
}

impl From<csv::Error> for GmmtError {
    fn from(e: csv::Error) -> Self {
        GmmtError::Data(format!("csv: {e}"))
    }
}

pub type Result<T, E = GmmtError> = std::result::Result<T, E>;
