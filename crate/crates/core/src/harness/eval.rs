//! Objective evaluation: Wav-MSE and SI-SDR per utterance at the native rate.

use serde::Serialize;

use super::data::{DatasetManifest, Utterance};
use crate::codec::CodecModel;
use crate::diffusion::Spf;
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::metrics::{si_sdr, wav_mse};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceMetrics {
    pub path: String,
    /// Samples compared; the tail past the last frame centre is excluded.
    pub n_samples: usize,
    pub wav_mse: f64,
    pub si_sdr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub sample_rate: u32,
    pub utterances: Vec<UtteranceMetrics>,
    pub mean_wav_mse: f64,
    pub mean_si_sdr_db: f64,
}

impl MetricReport {
    fn from_utterances(sample_rate: u32, utterances: Vec<UtteranceMetrics>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::NoUsableAudio);
        }
        let n = utterances.len() as f64;
        let mean_wav_mse = utterances.iter().map(|u| u.wav_mse).sum::<f64>() / n;
        let mean_si_sdr_db = utterances.iter().map(|u| u.si_sdr_db).sum::<f64>() / n;
        Ok(Self {
            sample_rate,
            utterances,
            mean_wav_mse,
            mean_si_sdr_db,
        })
    }

    /// One JSON record per utterance followed by an aggregate record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            let mut v = serde_json::to_value(u).expect("plain struct");
            v["kind"] = "utterance".into();
            v["sample_rate"] = self.sample_rate.into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let agg = serde_json::json!({
            "kind": "aggregate",
            "sample_rate": self.sample_rate,
            "n_utterances": self.utterances.len(),
            "wav_mse": self.mean_wav_mse,
            "si_sdr_db": self.mean_si_sdr_db,
        });
        out.push_str(&agg.to_string());
        out.push('\n');
        out
    }
}

/// Scores `reconstruct` on every utterance.
pub fn evaluate_with(
    utterances: &[Utterance],
    stft: &StftConfig,
    mut reconstruct: impl FnMut(&[f32]) -> Result<Vec<f32>>,
) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(utterances.len());
    for u in utterances {
        let y = reconstruct(&u.samples)?;
        if y.len() != u.samples.len() {
            return Err(Error::shape("reconstruction length", u.samples.len(), y.len()));
        }
        let n = stft.covered_len(u.samples.len());
        rows.push(UtteranceMetrics {
            path: u.path.display().to_string(),
            n_samples: n,
            wav_mse: wav_mse(&u.samples[..n], &y[..n])?,
            si_sdr_db: si_sdr(&u.samples[..n], &y[..n])?,
        });
    }
    MetricReport::from_utterances(stft.sample_rate, rows)
}

/// Encode, optionally enhance, decode and score.
pub fn evaluate(utterances: &[Utterance], codec: &CodecModel<f32>, spf: Option<(&Spf<f32>, u64)>) -> Result<MetricReport> {
    evaluate_with(utterances, &codec.config.stft_config(), |wave| {
        let codes = codec.encode_wave(wave)?;
        let mut spec = codec.decode_codes(&codes)?;
        if let Some((spf, seed)) = spf {
            spec = spf.enhance(&spec, seed)?;
        }
        codec.synthesize(&spec, wave.len())
    })
}

/// [`evaluate`] on the `test` split, falling back to every entry when the
/// manifest has none.
pub fn evaluate_manifest(manifest: &DatasetManifest, codec: &CodecModel<f32>, spf: Option<(&Spf<f32>, u64)>) -> Result<MetricReport> {
    let utts = match manifest.load_split("test") {
        Ok(u) => u,
        Err(Error::NoUsableAudio) => {
            let mut all = Vec::new();
            let mut splits: Vec<&str> = manifest.entries.iter().map(|e| e.split.as_str()).collect();
            splits.dedup();
            for s in splits {
                if let Ok(u) = manifest.load_split(s) {
                    all.extend(u);
                }
            }
            all
        }
        Err(e) => return Err(e),
    };
    evaluate(&utts, codec, spf)
}
