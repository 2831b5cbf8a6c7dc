use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the fusion library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or image shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An IR/VIS pair (or its mask) is not registered to the same size.
    #[error("registration error: {0}")]
    Registration(String),

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced or received non-finite values.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Dataset indexing failed (missing files, empty intersection).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Bad configuration file or value.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint file is malformed, truncated, or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Image decode/encode failure.
    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// Filesystem failure.
    #[error("i/o error for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 I/O, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Dataset(_) | Error::Checkpoint(_) | Error::Image { .. } | Error::Io { .. } => 2,
            Error::Dimension(_)
            | Error::Registration(_)
            | Error::Contract(_)
            | Error::Numeric(_) => 3,
        }
    }
}
