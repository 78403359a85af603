use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Why a binary file could not be decoded.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 8], found: [u8; 8] },
    #[error("unsupported format version {found} (this build reads {supported})")]
    Version { found: u8, supported: u8 },
    #[error("truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after the payload")]
    TrailingBytes(usize),
    #[error("malformed header: {0}")]
    Header(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error("checkpoint was written for a different model configuration: {0}")]
    ConfigMismatch(String),
    #[error("dataset manifest disagrees with `{file}`: {detail}")]
    Manifest { file: String, detail: String },
    #[error("pose width {0} is not 17 + 15 x joints")]
    PoseWidth(usize),
    #[error("BVH: {0}")]
    Bvh(String),
    #[error("stream: {0}")]
    Stream(String),
    #[error(transparent)]
    Core(#[from] movin_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub fn format(path: impl Into<PathBuf>) -> impl FnOnce(FormatError) -> Self {
        let path = path.into();
        move |source| Error::Format { path, source }
    }

    /// The decoding failure, if this is one.
    pub fn format_error(&self) -> Option<&FormatError> {
        match self {
            Error::Format { source, .. } => Some(source),
            _ => None,
        }
    }
}
