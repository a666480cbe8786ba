use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("unsupported audio in {path}: {detail}")]
    UnsupportedAudio { path: PathBuf, detail: String },
    #[error("malformed WAV file {path}: {detail}")]
    MalformedWav { path: PathBuf, detail: String },
    #[error("{path} contains no samples")]
    EmptyAudio { path: PathBuf },
    #[error("signal too short: {samples} samples, need at least {needed}")]
    SignalTooShort { samples: usize, needed: usize },
    #[error("expected {expected} Hz audio, got {found} Hz")]
    SampleRate { expected: u32, found: u32 },
    #[error("cannot pad {len} segments down to {target}")]
    PadTarget { len: usize, target: usize },

    #[error("weight bundle has bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("weight bundle checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("tensor `{name}` has shape {found:?}, configuration expects {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("weight bundle is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("weight bundle has unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("malformed weight bundle: {0}")]
    BundleFormat(String),

    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid degradation: {0}")]
    InvalidDegradation(String),
    #[error("manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
    #[error("{0}")]
    Metric(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("training diverged: {0}")]
    NonFiniteLoss(String),

    #[error(transparent)]
    Nn(#[from] nisqa_nn::NnError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// True for failures caused by the user's inputs (files, manifests,
    /// bundles, configuration) rather than by a defect in this crate.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Nn(_) | Error::NonFiniteLoss(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
