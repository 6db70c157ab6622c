//! Unpaired face-to-face translation with cycle-consistent generators and
//! multi-scale patch discriminators.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the element type for the common cases.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod imaging;
pub mod inference;
pub mod losses;
pub mod netspec;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tape;
pub mod training;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use imaging::{CropRect, CropSpec, Domain, FrameStore, ImageBatch};
pub use inference::{Direction, RoundTrip, TranslationJob};
pub use losses::{LossReport, LossWeights};
pub use netspec::{ConvLayerSpec, ConvStackSpec, Discriminator, Generator, GeneratorSpec};
pub use scalar::Scalar;
pub use training::TrainState;

pub type Tape32 = tape::Tape<f32>;
pub type Tape64 = tape::Tape<f64>;
pub type Generator32 = Generator<f32>;
pub type Generator64 = Generator<f64>;
pub type Discriminator32 = Discriminator<f32>;
pub type Discriminator64 = Discriminator<f64>;
pub type TrainState32 = TrainState<f32>;
pub type TrainState64 = TrainState<f64>;
pub type ImageBatch32 = ImageBatch<f32>;
pub type ImageBatch64 = ImageBatch<f64>;
