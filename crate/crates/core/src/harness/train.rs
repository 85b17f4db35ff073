//! Training loops for the codec and the post-filter.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{random_segment, DatasetManifest, Utterance};
use crate::codec::{CodecConfig, CodecModel, QuantizeMode};
use crate::error::{Error, Result};
use crate::losses::{LossReport, LossWeights, MultiResMelLoss};
use crate::nn::{Adam, AdamConfig};

/// Overrides the configured checkpoint directory when set.
pub const CHECKPOINT_DIR_ENV: &str = "COMPLEXDEC_CHECKPOINT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Samples per training crop; a multiple of the hop.
    pub segment_length: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Steps between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub checkpoint_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            segment_length: 96_000,
            max_steps: 500_000,
            seed: 0,
            loss_weights: LossWeights::default(),
            checkpoint_every: 10_000,
            log_every: 100,
            checkpoint_dir: PathBuf::from("checkpoints"),
        }
    }
}

impl TrainConfig {
    /// Single-core settings for the tiny preset on one utterance.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 2,
            segment_length: 24_000,
            max_steps: 2000,
            checkpoint_every: 0,
            log_every: 100,
            ..Self::default()
        }
    }

    /// Single-core post-filter settings: 64-frame crops.
    pub fn desk_spf() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 2,
            segment_length: 64 * 320,
            max_steps: 500,
            checkpoint_every: 0,
            log_every: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self, hop: usize) -> Result<()> {
        if self.batch_size == 0 || self.segment_length == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("batch size, segment length and lr must be positive".into()));
        }
        if self.segment_length % hop != 0 {
            return Err(Error::InvalidConfig(format!(
                "segment length {} is not a multiple of the hop {hop}",
                self.segment_length
            )));
        }
        self.loss_weights.validate()
    }

    /// The checkpoint directory after applying the environment override.
    pub fn resolved_checkpoint_dir(&self) -> PathBuf {
        match std::env::var_os(CHECKPOINT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.checkpoint_dir.clone(),
        }
    }
}

/// Contents of a codec training config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecTrainFile {
    pub train: TrainConfig,
    pub codec: CodecConfig,
}

impl CodecTrainFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Independent, reproducible random stream for `(seed, purpose, step)`.
pub(crate) fn step_rng(seed: u64, purpose: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    // 2^36 words per step keeps steps disjoint for any practical batch
    rng.set_word_pos((step as u128) << 36);
    rng
}

pub(crate) struct JsonlLog {
    out: Option<BufWriter<File>>,
}

impl JsonlLog {
    pub(crate) fn create(dir: Option<&Path>, name: &str) -> Result<Self> {
        let out = match dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(name);
                Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
            }
            None => None,
        };
        Ok(Self { out })
    }

    pub(crate) fn line(&mut self, line: &str) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            writeln!(w, "{line}").map_err(|e| Error::io("loss log", e))?;
        }
        Ok(())
    }

    pub(crate) fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            w.flush().map_err(|e| Error::io("loss log", e))?;
        }
        Ok(())
    }
}

pub struct CodecRun {
    pub model: CodecModel<f32>,
    /// One report per step.
    pub reports: Vec<LossReport>,
}

/// Trains the codec on random crops of `utterances`.
///
/// With an output directory, writes `codec_loss.jsonl`, periodic
/// `codec_step{N}.cpxm` checkpoints and the final `codec.cpxm`.
pub fn train_codec(utterances: &[Utterance], mut codec: CodecConfig, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<CodecRun> {
    if utterances.is_empty() {
        return Err(Error::NoUsableAudio);
    }
    cfg.validate(codec.hop)?;
    codec.loss_weights = cfg.loss_weights;
    let mut model = CodecModel::<f32>::new(codec, cfg.seed)?;
    let mel = MultiResMelLoss::standard(model.config.sample_rate)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut log = JsonlLog::create(out_dir, "codec_loss.jsonl")?;
    let mut ema_rng = step_rng(cfg.seed, 2, 0);
    let mut reports = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        let mut crop_rng = step_rng(cfg.seed, 1, step as u64);
        let batch: Vec<Vec<f32>> = (0..cfg.batch_size)
            .map(|_| random_segment(utterances, cfg.segment_length, &mut crop_rng))
            .collect();
        let report = model.forward_backward(&batch, QuantizeMode::Rvq, &mel, Some(&mut ema_rng))?;
        adam.step(model.params_mut());
        log.line(&report.to_json_line(step))?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("codec step {step}: total {:.4} (mel {:.4}, mse {:.5}, mae {:.5}, vq {:.5})", report.total, report.terms.mel, report.terms.mse, report.terms.mae, report.terms.vq);
        }
        reports.push(report);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                model.save(&dir.join(format!("codec_step{:07}.cpxm", step + 1)))?;
            }
        }
    }
    log.flush()?;
    if let Some(dir) = out_dir {
        model.save(&dir.join("codec.cpxm"))?;
    }
    Ok(CodecRun { model, reports })
}

/// [`train_codec`] on the `train` split of a manifest.
pub fn train_codec_from_manifest(manifest: &DatasetManifest, codec: CodecConfig, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<CodecRun> {
    train_codec(&manifest.load_split("train")?, codec, cfg, out_dir)
}
