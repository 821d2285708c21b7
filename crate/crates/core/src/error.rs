use std::path::PathBuf;

use thiserror::Error;

/// Shape of a 4-D tensor, used in error messages.
pub type Dims = [usize; 4];

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got dims {0:?}")]
    NonScalarLoss(Dims),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("weights file: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("weights file: unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("weights file: CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("weights file: truncated while reading {0}")]
    Truncated(&'static str),

    #[error("weights file: {0}")]
    Malformed(String),

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iter}")]
    Diverged { iter: usize },

    #[error("no usable images in {0}")]
    EmptyDataset(PathBuf),

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI; one value per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ShapeMismatch { .. } | Error::InvalidArgument { .. } | Error::NonScalarLoss(_) => 2,
            Error::Config(_) => 3,
            Error::Io { .. } | Error::Image { .. } | Error::EmptyDataset(_) => 4,
            Error::BadMagic(_)
            | Error::VersionMismatch { .. }
            | Error::CrcMismatch { .. }
            | Error::Truncated(_)
            | Error::Malformed(_) => 5,
            Error::MissingParameter(_) | Error::ParameterShape { .. } => 6,
            Error::NonFinite { .. } | Error::Diverged { .. } => 7,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
