use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {0}")]
    BadMagic(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u32),
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsupported Noll index {0} (supported: 1..=15)")]
    UnsupportedNoll(u32),
    #[error("empty specimen: convolved image has no positive intensity")]
    EmptySpecimen,
    #[error("empty phantom after {0} thresholding attempts")]
    EmptyPhantom(u32),
    #[error("negative measurement value {value} at voxel {index}")]
    NegativeInput { index: usize, value: f64 },
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("endpoint singularity: gamma({t}) = {gamma} is below the floor")]
    EndpointSingularity { t: f64, gamma: f64 },
    #[error("head count {heads} does not divide channel count {channels}")]
    HeadDivisibility { heads: usize, channels: usize },
    #[error("graph already consumed by a previous backward pass")]
    GraphReuse,
    #[error("non-finite state at step {step} (t = {t})")]
    NonFinite { step: usize, t: f64 },
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
