//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's preconditions.
    #[error("invalid input: {0}")]
    Input(String),

    /// The requested value is mathematically undefined for this input.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two checkpoints cannot be paired as requested.
    #[error("pairing error: {0}")]
    Pairing(String),

    /// Malformed container bytes.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    /// An index entry does not resolve to a valid region of its shard.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Tensor name not present in the checkpoint index.
    #[error("unknown tensor: {0}")]
    UnknownTensor(String),

    /// Storage dtype outside the supported set (BF16, F16, F32).
    #[error("unsupported dtype {dtype} for tensor {tensor}")]
    UnsupportedDtype { tensor: String, dtype: String },

    /// A numerical routine failed; names the layer it was working on.
    #[error("numerical error in {layer}: {message}")]
    Numerical { layer: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
