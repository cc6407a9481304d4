use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest row {row}: {message}")]
    ManifestRow { row: u64, message: String },

    #[error("manifest row {row}: unknown class name `{name}`")]
    UnknownClass { row: u64, name: String },

    #[error("duplicate image id `{0}`")]
    DuplicateImageId(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("cannot split dataset: {0}")]
    Split(String),

    #[error("augmentation: {0}")]
    Augment(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("input resolution {width}x{height} does not match backbone input {expected}x{expected}")]
    InputResolution {
        expected: usize,
        width: usize,
        height: usize,
    },

    #[error("class {0} has no images in the projection pool")]
    EmptyClassPool(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid loss input: {0}")]
    Loss(String),

    #[error("prototypes have no projection sources; run projection first")]
    NotProjected,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: String, expected: u32 },

    #[error("non-finite loss at epoch {epoch}")]
    Diverged {
        epoch: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error("calibration: {0}")]
    Calibration(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
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
