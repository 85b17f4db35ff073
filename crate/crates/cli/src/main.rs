use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use complexdec::bitstream::unpack;
use complexdec::dsp::{read_wav, write_wav, PcmDepth, WaveSegment};
use complexdec::{Codec, PostFilter};
use complexdec::harness::{
    decode_from_bytes, encode_to_bytes, evaluate, evaluate_manifest, export_wave_spectrogram, train_codec, train_spf, CodecTrainFile,
    DatasetManifest, SpfTrainFile, TrainConfig, Utterance,
};

/// Complex-spectral neural audio codec.
#[derive(Parser)]
#[command(name = "complexdec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Training audio: a manifest or a single WAV file.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct Audio {
    /// Dataset manifest (TOML); its `train` split is used for training.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// A single WAV file.
    #[arg(long)]
    wav: Option<PathBuf>,
}

impl Audio {
    fn load(&self, split: &str) -> Result<Vec<Utterance>> {
        let manifest = match (&self.manifest, &self.wav) {
            (Some(m), _) => DatasetManifest::load(m)?,
            (None, Some(w)) => DatasetManifest::single(w.clone(), split),
            (None, None) => bail!("give --manifest or --wav"),
        };
        Ok(manifest.load_split(split)?)
    }
}

#[derive(Args)]
struct TrainOverrides {
    /// Output directory; defaults to the configured checkpoint directory
    /// (which COMPLEXDEC_CHECKPOINT_DIR overrides).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) -> PathBuf {
        if let Some(s) = self.steps {
            cfg.max_steps = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        self.out.clone().unwrap_or_else(|| cfg.resolved_checkpoint_dir())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the codec.
    TrainCodec {
        /// TOML with `[train]` and `[codec]` tables; desk defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        audio: Audio,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Train the post-filter against a frozen codec.
    TrainSpf {
        /// TOML with `[train]` and `[spf]` tables; desk defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        codec: PathBuf,
        #[command(flatten)]
        audio: Audio,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// WAV to .cpxd.
    Encode {
        #[arg(long)]
        codec: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// .cpxd to WAV.
    Decode {
        #[arg(long)]
        codec: PathBuf,
        /// Refine the decoded spectrum with this post-filter.
        #[arg(long)]
        spf: Option<PathBuf>,
        /// Sampler seed for the post-filter.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        input: PathBuf,
        output: PathBuf,
    },
    /// Wav-MSE and SI-SDR report as JSON lines.
    Eval {
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        spf: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, conflicts_with = "manifest")]
        wav: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// WAV to a grayscale log-magnitude PNG.
    Spectrogram { input: PathBuf, output: PathBuf },
    /// Print the header of a .cpxd file.
    Info { input: PathBuf },
}

fn load_spf(path: Option<&Path>, seed: u64) -> Result<Option<(PostFilter, u64)>> {
    path.map(|p| Ok((PostFilter::load(p).with_context(|| format!("loading post-filter {}", p.display()))?, seed)))
        .transpose()
}

fn load_codec(path: &Path) -> Result<Codec> {
    Codec::load(path).with_context(|| format!("loading codec {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainCodec { config, audio, overrides } => {
            let mut file = match config {
                Some(p) => CodecTrainFile::load(&p)?,
                None => CodecTrainFile {
                    train: TrainConfig::desk(),
                    codec: complexdec::codec::CodecConfig::tiny(),
                },
            };
            let out = overrides.apply(&mut file.train);
            let utts = audio.load("train")?;
            let run = train_codec(&utts, file.codec, &file.train, Some(&out))?;
            if let (Some(first), Some(last)) = (run.reports.first(), run.reports.last()) {
                println!("loss {:.4} -> {:.4} over {} steps", first.total, last.total, run.reports.len());
            }
            println!("wrote {}", out.join("codec.cpxm").display());
        }
        Command::TrainSpf {
            config,
            codec,
            audio,
            overrides,
        } => {
            let mut file = match config {
                Some(p) => SpfTrainFile::load(&p)?,
                None => SpfTrainFile::default(),
            };
            let out = overrides.apply(&mut file.train);
            let model = load_codec(&codec)?;
            let utts = audio.load("train")?;
            let run = train_spf(&utts, &model, file.spf, &file.train, Some(&out))?;
            if let (Some(first), Some(last)) = (run.losses.first(), run.losses.last()) {
                println!("loss {first:.4e} -> {last:.4e} over {} steps", run.losses.len());
            }
            println!("wrote {}", out.join("spf.cpxs").display());
        }
        Command::Encode { codec, input, output } => {
            let model = load_codec(&codec)?;
            let wave = read_wav::<complexdec::Real>(&input)?;
            if wave.sample_rate != model.config.sample_rate {
                bail!("{} is {} Hz but the codec expects {} Hz", input.display(), wave.sample_rate, model.config.sample_rate);
            }
            let bytes = encode_to_bytes(&model, &wave.samples)?;
            fs::write(&output, &bytes).with_context(|| format!("writing {}", output.display()))?;
            println!("{} bytes", bytes.len());
        }
        Command::Decode {
            codec,
            spf,
            seed,
            input,
            output,
        } => {
            let model = load_codec(&codec)?;
            let spf = load_spf(spf.as_deref(), seed)?;
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let samples = decode_from_bytes(&model, &bytes, spf.as_ref().map(|(s, k)| (s, *k)))?;
            let wave = WaveSegment::new(samples.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(), model.config.sample_rate)?;
            write_wav(&output, &wave, PcmDepth::Bits16)?;
        }
        Command::Eval {
            codec,
            spf,
            seed,
            manifest,
            wav,
            out,
        } => {
            let model = load_codec(&codec)?;
            let spf = load_spf(spf.as_deref(), seed)?;
            let spf = spf.as_ref().map(|(s, k)| (s, *k));
            let report = match (manifest, wav) {
                (Some(m), _) => evaluate_manifest(&DatasetManifest::load(&m)?, &model, spf)?,
                (None, Some(w)) => evaluate(&DatasetManifest::single(w, "test").load_split("test")?, &model, spf)?,
                (None, None) => bail!("give --manifest or --wav"),
            };
            match out {
                Some(p) => fs::write(&p, report.to_jsonl()).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{}", report.to_jsonl()),
            }
        }
        Command::Spectrogram { input, output } => {
            let wave = read_wav::<complexdec::Real>(&input)?;
            let config = complexdec::dsp::StftConfig {
                sample_rate: wave.sample_rate,
                ..Default::default()
            };
            export_wave_spectrogram(&wave.samples, config, &output)?;
        }
        Command::Info { input } => {
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let (h, _) = unpack(&bytes)?;
            let frame_rate = h.sample_rate as f64 / h.hop as f64;
            println!("version         {}", h.version);
            println!("sample rate     {} Hz", h.sample_rate);
            println!("hop / fft       {} / {}", h.hop, h.fft_size);
            println!("stages          {} real + {} imaginary", h.n_stages_real, h.n_stages_imag);
            println!("bits per index  {}", h.bits_per_index);
            println!("frames          {}", h.n_frames);
            println!("samples         {} ({:.3} s)", h.n_samples, h.n_samples as f64 / h.sample_rate as f64);
            println!("bytes per frame {}", h.frame_bytes());
            println!("bitrate         {:.1} bps", frame_rate * h.frame_bits() as f64);
            println!("stream size     {} bytes, checksum ok", bytes.len());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
