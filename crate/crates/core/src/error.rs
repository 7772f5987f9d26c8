use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("layer {layer} is not part of this backbone")]
    LayerNotInBackbone { layer: String },

    #[error("layer {layer} is not a relu layer")]
    NotRelu { layer: String },

    #[error("no layers requested")]
    EmptyRequest,

    #[error("image {height}x{width} is too small for layer {layer} (needs at least {min}x{min})")]
    ImageTooSmall {
        layer: String,
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("channel index {index} out of range for layer {layer} with {channels} channels")]
    ChannelOutOfRange {
        layer: String,
        index: usize,
        channels: usize,
    },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch for {what}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("weights file {0} not found")]
    MissingWeights(PathBuf),

    #[error("weights file is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unsupported tensor dtype {dtype} for `{name}`")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("checksum mismatch: expected {expected}, got {actual}")]
    ChecksumMismatch { expected: String, actual: String },

    #[error("invalid objective: {0}")]
    InvalidObjective(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("optimisation failed: {reason}")]
    Optimization {
        reason: String,
        partial: Box<crate::inversion::RunResult>,
    },

    #[error("safetensors: {0}")]
    Safetensors(#[from] safetensors::SafeTensorError),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
