use std::path::PathBuf;

/// Errors from scene files, images and checkpoints.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("view {view_id}: image {path} is missing or unreadable")]
    MissingImage { view_id: usize, path: PathBuf },
    #[error("view {view_id}: invalid pose: {reason}")]
    InvalidPose { view_id: usize, reason: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("checkpoint format version {found} is not supported (this build reads version {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptArchive(String),
    #[error("tensor `{tensor}` has shape {found:?} but the model expects {expected:?}")]
    ShapeMismatch { tensor: String, expected: (usize, usize), found: (usize, usize) },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] nlf_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
