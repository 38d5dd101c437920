use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid video: {0}")]
    InvalidVideo(String),

    #[error("frame {}: {detail}", path.display())]
    Frame { path: PathBuf, detail: String },

    #[error("archive: bad magic bytes")]
    BadMagic,

    #[error("archive: unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("archive: truncated header")]
    TruncatedHeader,

    #[error("archive: malformed header: {0}")]
    MalformedHeader(String),

    #[error("archive: truncated payload for entry {0:?}")]
    TruncatedPayload(String),

    #[error("archive: entry {name:?} shape {shape:?} does not match byte length {length}")]
    LengthMismatch {
        name: String,
        shape: Vec<usize>,
        length: usize,
    },

    #[error("archive: duplicate entry {0:?}")]
    DuplicateEntry(String),

    #[error("archive: missing entry {0:?}")]
    MissingEntry(String),

    #[error("network: {0}")]
    Network(String),

    #[error("config: {0}")]
    Config(String),

    #[error("loss: {0}")]
    Loss(String),

    #[error("non-finite {what} at octave {octave}, iteration {iteration}")]
    NonFinite {
        what: &'static str,
        octave: i32,
        iteration: usize,
    },

    #[error("series: {0}")]
    Series(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable one-word category for command-line error reports.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Graph(_) => "graph",
            Error::InvalidArgument(_) => "argument",
            Error::InvalidVideo(_) | Error::Frame { .. } | Error::Image(_) => "video",
            Error::BadMagic
            | Error::UnsupportedVersion(_)
            | Error::TruncatedHeader
            | Error::MalformedHeader(_)
            | Error::TruncatedPayload(_)
            | Error::LengthMismatch { .. }
            | Error::DuplicateEntry(_)
            | Error::MissingEntry(_) => "archive",
            Error::Network(_) => "network",
            Error::Config(_) => "config",
            Error::Loss(_) => "loss",
            Error::NonFinite { .. } => "numeric",
            Error::Series(_) => "series",
            Error::Io(_) | Error::Csv(_) => "io",
        }
    }

    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }
}
