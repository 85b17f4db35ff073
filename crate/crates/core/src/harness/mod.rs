//! Training, evaluation and dataset plumbing.

mod data;
mod eval;
mod image;
mod pipeline;
mod spf;
mod synth;
mod train;

pub use data::{looped_segment, random_segment, DatasetManifest, ManifestEntry, Utterance};
pub use eval::{evaluate, evaluate_manifest, evaluate_with, MetricReport, UtteranceMetrics};
pub use image::{export_spectrogram_image, export_wave_spectrogram, spectrogram_image};
pub use pipeline::{bytes_to_codes, codes_to_bytes, decode_from_bytes, encode_to_bytes, header_for};
pub use spf::{crop_frames, residual_variance, train_spf, train_spf_from_manifest, train_spf_on_pairs, SpfPair, SpfRun, SpfTrainFile};
pub use synth::{synthetic_utterance, NOISE_FLOOR};
pub use train::{train_codec, train_codec_from_manifest, CodecRun, CodecTrainFile, TrainConfig, CHECKPOINT_DIR_ENV};
