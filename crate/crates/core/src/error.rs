use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: unsupported audio: {reason}", path.display())]
    UnsupportedAudio { path: PathBuf, reason: String },
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("signal too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("too few frames: {frames}, encoder needs at least {min}")]
    TooFewFrames { frames: usize, min: usize },
    #[error("zero-norm vector in {0}")]
    ZeroNorm(String),
    #[error("degenerate batch: pseudo-speaker norm {0:.3e}")]
    DegeneratePseudoSpeaker(f64),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("checkpoint {}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },
    #[error("evaluation: {0}")]
    Evaluation(String),
    #[error("not implemented: {0}")]
    NotImplemented(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
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
