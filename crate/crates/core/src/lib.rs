pub mod bitstream;
pub mod checkpoint;
pub mod codec;
pub mod diffusion;
pub mod dsp;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rvq;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Precision used for training, checkpoints and the command line.
pub type Real = f32;
pub type Codec = codec::CodecModel<Real>;
pub type PostFilter = diffusion::Spf<Real>;
pub type Spectrogram = dsp::ComplexSpectrogram<Real>;
