//! Deterministic signal transforms: STFT/iSTFT, companding, mel analysis and WAV I/O.

pub mod compand;
pub mod mel;
pub mod stft;
pub mod wav;

pub use compand::{compand, decompand, CompandingParams};
pub use mel::{mel_spectrogram, MelAnalyzer, MelConfig};
pub use stft::{istft, stft, ComplexSpectrogram, StftConfig, StftPlan, WaveSegment, Window};
pub use wav::{read_wav, write_wav, PcmDepth};
