//! Post-filter training on (clean, decoded) companded spectrum pairs.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2};
use num_complex::Complex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{DatasetManifest, Utterance};
use super::train::{step_rng, JsonlLog, TrainConfig};
use crate::codec::{CodecModel, QuantizeMode};
use crate::diffusion::{draw_times_and_noise, Spf, SpfConfig};
use crate::dsp::compand::compand_matrix;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Module};

/// Contents of a post-filter training config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpfTrainFile {
    pub train: TrainConfig,
    pub spf: SpfConfig,
}

impl Default for SpfTrainFile {
    fn default() -> Self {
        Self {
            train: TrainConfig::desk_spf(),
            spf: SpfConfig::default(),
        }
    }
}

impl SpfTrainFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Companded clean and decoded spectra of one utterance.
#[derive(Debug, Clone)]
pub struct SpfPair {
    pub clean: Array2<Complex<f32>>,
    pub decoded: Array2<Complex<f32>>,
}

impl SpfPair {
    pub fn from_wave(codec: &CodecModel<f32>, wave: &[f32], cfg: &SpfConfig) -> Result<Self> {
        let out = codec.codec_forward(wave, QuantizeMode::Rvq)?;
        Ok(Self {
            clean: compand_matrix(&out.spec.data, &cfg.companding),
            decoded: compand_matrix(&out.spec_hat.data, &cfg.companding),
        })
    }

    /// `frames` consecutive frames starting at `start`, wrapping around.
    pub fn crop(&self, start: usize, frames: usize) -> (Array2<Complex<f32>>, Array2<Complex<f32>>) {
        let n = self.clean.nrows();
        if start + frames <= n {
            let r = s![start..start + frames, ..];
            return (self.clean.slice(r).to_owned(), self.decoded.slice(r).to_owned());
        }
        let pick = |a: &Array2<Complex<f32>>| Array2::from_shape_fn((frames, a.ncols()), |(i, j)| a[[(start + i) % n, j]]);
        (pick(&self.clean), pick(&self.decoded))
    }
}

pub struct SpfRun {
    pub spf: Spf<f32>,
    /// Mean score-matching loss per step.
    pub losses: Vec<f64>,
}

/// Frames per training crop for a segment length in samples, rounded down
/// to what the U-Net accepts.
pub fn crop_frames(cfg: &TrainConfig, hop: usize, spf: &SpfConfig) -> Result<usize> {
    let m = spf.unet.size_multiple();
    let frames = cfg.segment_length / hop / m * m;
    if frames == 0 {
        return Err(Error::InvalidConfig(format!(
            "segment of {} samples is shorter than {m} frames",
            cfg.segment_length
        )));
    }
    Ok(frames)
}

/// Mean squared residual `clean - decoded` per real component.
pub fn residual_variance(pairs: &[SpfPair]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for p in pairs {
        sum += p.clean.iter().zip(&p.decoded).map(|(a, b)| (a - b).norm_sqr() as f64).sum::<f64>();
        count += 2 * p.clean.len();
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Trains the post-filter on random crops of `pairs`, estimating the prior
/// variance from them when the config leaves it unset. With an output
/// directory, writes `spf_loss.jsonl`, periodic checkpoints and `spf.cpxs`.
pub fn train_spf_on_pairs(pairs: &[SpfPair], spf_cfg: SpfConfig, cfg: &TrainConfig, hop: usize, out_dir: Option<&Path>) -> Result<SpfRun> {
    if pairs.is_empty() {
        return Err(Error::NoUsableAudio);
    }
    cfg.validate(hop)?;
    let frames = crop_frames(cfg, hop, &spf_cfg)?;
    let mut spf_cfg = spf_cfg;
    if spf_cfg.prior_variance.is_none() {
        let v = residual_variance(pairs);
        log::info!("estimated residual variance {v:.4e}");
        spf_cfg.prior_variance = Some(v);
    }
    let mut spf = Spf::<f32>::new(spf_cfg, cfg.seed)?;
    let sde = spf.config.sde;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut log = JsonlLog::create(out_dir, "spf_loss.jsonl")?;
    let mut losses = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        let mut rng = step_rng(cfg.seed, 3, step as u64);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let pair = &pairs[rng.random_range(0..pairs.len())];
            let start = rng.random_range(0..pair.clean.nrows());
            let (x0, x_hat) = pair.crop(start, frames);
            let (t, z) = draw_times_and_noise(1, x0.dim(), &sde, &mut rng).pop().expect("one draw");
            batch.push((x0, x_hat, t, z));
        }
        spf.net.zero_grad();
        let loss = spf.accumulate(&batch)?;
        adam.step(spf.net.params_mut());
        log.line(&serde_json::json!({ "step": step, "loss": loss }).to_string())?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("spf step {step}: loss {loss:.4e}");
        }
        losses.push(loss);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                spf.save(&dir.join(format!("spf_step{:07}.cpxs", step + 1)))?;
            }
        }
    }
    log.flush()?;
    if let Some(dir) = out_dir {
        spf.save(&dir.join("spf.cpxs"))?;
    }
    Ok(SpfRun { spf, losses })
}

/// Builds pairs for every utterance with the frozen codec, then trains.
pub fn train_spf(utterances: &[Utterance], codec: &CodecModel<f32>, spf_cfg: SpfConfig, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<SpfRun> {
    let pairs = utterances
        .iter()
        .map(|u| SpfPair::from_wave(codec, &u.samples, &spf_cfg))
        .collect::<Result<Vec<_>>>()?;
    train_spf_on_pairs(&pairs, spf_cfg, cfg, codec.config.hop, out_dir)
}

pub fn train_spf_from_manifest(
    manifest: &DatasetManifest,
    codec: &CodecModel<f32>,
    spf_cfg: SpfConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<SpfRun> {
    train_spf(&manifest.load_split("train")?, codec, spf_cfg, cfg, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::diffusion::{SdeConfig, UNetConfig};
    use crate::harness::synthetic_utterance;

    #[test]
    fn training_times_never_fall_below_t_eps() {
        let sde = SdeConfig::default();
        let mut rng = step_rng(0, 3, 0);
        let draws = draw_times_and_noise::<f32>(100_000, (1, 1), &sde, &mut rng);
        assert!(draws.iter().all(|(t, _)| *t >= sde.t_eps && *t <= sde.t_max));
    }

    #[test]
    fn crops_wrap_around() {
        let clean = Array2::from_shape_fn((5, 2), |(i, j)| Complex::new(i as f32, j as f32));
        let pair = SpfPair { clean: clean.clone(), decoded: clean };
        let (a, _) = pair.crop(3, 4);
        assert_eq!(a.column(0).to_vec(), vec![Complex::new(3.0, 0.0), Complex::new(4.0, 0.0), Complex::new(0.0, 0.0), Complex::new(1.0, 0.0)]);
    }

    #[test]
    fn seeded_runs_repeat_and_write_outputs() {
        let codec = CodecModel::<f32>::new(CodecConfig::tiny(), 0).unwrap();
        let utt = vec![Utterance {
            path: "toy".into(),
            samples: synthetic_utterance(0.2, 48_000, 2),
        }];
        let spf_cfg = SpfConfig {
            unet: UNetConfig { base_channels: 2, channel_mults: vec![1, 2], fourier_features: 2, fourier_scale: 4.0 },
            tile_frames: 8,
            ..Default::default()
        };
        let cfg = TrainConfig { batch_size: 1, segment_length: 8 * 320, max_steps: 3, ..TrainConfig::desk_spf() };
        let dir = tempfile::tempdir().unwrap();
        let a = train_spf(&utt, &codec, spf_cfg.clone(), &cfg, Some(dir.path())).unwrap();
        let b = train_spf(&utt, &codec, spf_cfg, &cfg, None).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(std::fs::read_to_string(dir.path().join("spf_loss.jsonl")).unwrap().lines().count(), 3);
        let loaded = Spf::<f32>::load(&dir.path().join("spf.cpxs")).unwrap();
        assert_eq!(loaded.config.prior_variance, a.spf.config.prior_variance);
        assert!(a.spf.prior_variance() > 0.0);
    }

    #[test]
    fn residual_variance_is_per_component() {
        let clean = Array2::from_elem((2, 3), Complex::new(1.0f32, 2.0));
        let decoded = Array2::from_elem((2, 3), Complex::new(0.0f32, 0.0));
        assert!((residual_variance(&[SpfPair { clean, decoded }]) - 2.5).abs() < 1e-12);
        assert_eq!(residual_variance(&[]), 0.0);
    }
}
