use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("cannot encode image {path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("`{name}` has no counterpart in {missing_in}")]
    MissingCounterpart { name: String, missing_in: PathBuf },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("image of {height}x{width} is smaller than the {patch}x{patch} patch")]
    ImageTooSmall { height: usize, width: usize, patch: usize },

    #[error(
        "discriminator input {height}x{width} is too small for {scales} scales of {layers} stride-2 layers; \
         minimum admissible size is {min_size}x{min_size}"
    )]
    DiscInputTooSmall {
        height: usize,
        width: usize,
        scales: usize,
        layers: usize,
        min_size: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "perceptual backbone weights unavailable ({0}); provide converted VGG-16 weights or \
         select `backbone = \"surrogate\"` in the perceptual config"
    )]
    BackboneUnavailable(String),

    #[error("non-finite value in `{term}`")]
    NonFinite { term: String },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("checkpoint parameter `{name}` has shape {found:?}, model expects {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is missing parameter `{0}`")]
    MissingParam(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
