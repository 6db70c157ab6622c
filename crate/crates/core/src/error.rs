use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no frames in {0}")]
    NoFrames(PathBuf),
    #[error("corrupt frame {0}")]
    CorruptFrame(String),
    #[error("crop out of bounds: {0}")]
    CropOutOfBounds(String),
    #[error("invalid layer spec: {0}")]
    LayerSpec(String),
    #[error("stack consumes input at layer {layer} (size {size})")]
    StackConsumesInput { layer: usize, size: i64 },
    #[error("unreachable receptive field {0}")]
    UnreachableReceptiveField(usize),
    #[error("input too small for probe: {0}")]
    InputTooSmallForProbe(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("non-finite parameter in {net} at step {step}")]
    NonFiniteParameter { net: String, step: u64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("checkpoint version unsupported: {0}")]
    CheckpointVersion(u32),
    #[error("checkpoint structure does not match config: {0}")]
    Structure(String),
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by invalid input detected before any work
    /// (bad config, stack, crop, data directory or checkpoint); false for
    /// failures during a run.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NonFiniteLoss(_) | Error::NonFiniteParameter { .. } | Error::ShapeMismatch(_) | Error::Image { .. } | Error::Io(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
