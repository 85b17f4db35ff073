//! Complex-spectral RVQ autoencoder.
//!
//! The real and imaginary halves of the STFT are coded separately: each half
//! (`frames x bins`) is treated as a `bins`-channel sequence, encoded by the
//! shared encoder into `channels`-dim latents per frame, quantized by its own
//! residual quantizer and reconstructed by the shared decoder. Every layer
//! has unit stride, so the frame rate of the codes equals the STFT frame rate.

use ndarray::{concatenate, s, Array2, Axis};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::checkpoint::Archive;
use crate::dsp::{ComplexSpectrogram, StftConfig, StftPlan, Window};
use crate::error::{Error, Result};
use crate::losses::{complex_mae, complex_mae_grad, complex_mse, complex_mse_grad, total_loss, LossReport, LossTerms, LossWeights, MultiResMelLoss};
use crate::nn::{elu, elu_backward, Conv1d, ConvTranspose1d, Module, Padding, Param};
use crate::rvq::{commitment_grad, commitment_loss, read_codebooks, write_codebooks, Branch, RvqStack, VqConfig};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub channels: usize,
    pub input_kernel: usize,
    pub n_blocks: usize,
    pub units_per_block: usize,
    pub unit_kernel: usize,
    pub dilations: Vec<usize>,
    pub block_kernel: usize,
    pub output_kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 256,
            input_kernel: 7,
            n_blocks: 4,
            units_per_block: 3,
            unit_kernel: 7,
            dilations: vec![1, 3, 9],
            block_kernel: 2,
            output_kernel: 3,
        }
    }
}

fn same_reach(kernel: usize, dilation: usize) -> (usize, usize) {
    let total = dilation * (kernel - 1);
    (total - total / 2, total / 2)
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let kernels = [self.input_kernel, self.unit_kernel, self.block_kernel, self.output_kernel];
        if self.channels == 0 || kernels.contains(&0) {
            return Err(Error::InvalidConfig("encoder channels and kernels must be positive".into()));
        }
        if self.dilations.len() != self.units_per_block || self.dilations.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "need {} positive dilations, got {:?}",
                self.units_per_block, self.dilations
            )));
        }
        Ok(())
    }

    /// Frames of input context (left, right) that one encoder output frame depends on.
    pub fn receptive_field(&self) -> (usize, usize) {
        let (mut l, mut r) = same_reach(self.input_kernel, 1);
        for _ in 0..self.n_blocks {
            for &d in &self.dilations {
                let (a, b) = same_reach(self.unit_kernel, d);
                l += a;
                r += b;
            }
            l += self.block_kernel - 1;
        }
        let (a, b) = same_reach(self.output_kernel, 1);
        (l + a, r + b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub hop: usize,
    pub fft_size: usize,
    pub encoder: EncoderConfig,
    pub bits: u8,
    pub n_stages_real: usize,
    pub n_stages_imag: usize,
    pub ema_decay: f64,
    pub ema_eps: f64,
    pub dead_after: u32,
    pub loss_weights: LossWeights,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sample_rate: 48_000,
            hop: 320,
            fft_size: 510,
            encoder: EncoderConfig::default(),
            bits: 10,
            n_stages_real: 8,
            n_stages_imag: 8,
            ema_decay: 0.99,
            ema_eps: 1e-5,
            dead_after: 200,
            loss_weights: LossWeights::default(),
        }
    }
}

impl CodecConfig {
    /// 8 channels, 16-entry codebooks, 2 stages per branch.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                channels: 8,
                ..EncoderConfig::default()
            },
            bits: 4,
            n_stages_real: 2,
            n_stages_imag: 2,
            ..Self::default()
        }
    }

    pub fn stft_config(&self) -> StftConfig {
        StftConfig {
            hop: self.hop,
            fft_size: self.fft_size,
            window: Window::Hann,
            sample_rate: self.sample_rate,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.channels
    }

    pub fn vq_config(&self, n_stages: usize) -> VqConfig {
        VqConfig {
            bits: self.bits,
            dim: self.latent_dim(),
            n_stages,
            decay: self.ema_decay,
            eps: self.ema_eps,
            dead_after: self.dead_after,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft_config().validate()?;
        self.encoder.validate()?;
        self.loss_weights.validate()?;
        if !(1..=16).contains(&self.bits) {
            return Err(Error::InvalidConfig(format!("bits {} outside 1..=16", self.bits)));
        }
        if self.n_stages_real == 0 || self.n_stages_real + self.n_stages_imag > 255 {
            return Err(Error::InvalidConfig("bad stage counts".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) || self.ema_eps <= 0.0 {
            return Err(Error::InvalidConfig("bad EMA settings".into()));
        }
        Ok(())
    }

    pub fn bitrate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64 * (self.n_stages_real + self.n_stages_imag) as f64 * self.bits as f64
    }
}

/// First convolution of a residual unit.
#[derive(Debug, Clone)]
enum UnitConv<T> {
    Dilated(Conv1d<T>),
    Transposed(ConvTranspose1d<T>),
}

impl<T: Scalar> UnitConv<T> {
    fn forward(&self, x: &Array2<T>) -> Array2<T> {
        match self {
            UnitConv::Dilated(c) => c.forward(x),
            UnitConv::Transposed(c) => c.forward(x),
        }
    }

    fn backward(&mut self, x: &Array2<T>, g: &Array2<T>) -> Array2<T> {
        match self {
            UnitConv::Dilated(c) => c.backward(x, g),
            UnitConv::Transposed(c) => c.backward(x, g),
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        match self {
            UnitConv::Dilated(c) => c.params(),
            UnitConv::Transposed(c) => c.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            UnitConv::Dilated(c) => c.params_mut(),
            UnitConv::Transposed(c) => c.params_mut(),
        }
    }
}

/// `x + conv1x1(elu(conv(elu(x))))`
#[derive(Debug, Clone)]
struct ResUnit<T> {
    conv: UnitConv<T>,
    proj: Conv1d<T>,
}

struct UnitCache<T> {
    x: Array2<T>,
    a: Array2<T>,
    b: Array2<T>,
    c: Array2<T>,
}

impl<T: Scalar> ResUnit<T> {
    fn forward(&self, x: &Array2<T>) -> (Array2<T>, UnitCache<T>) {
        let a = elu(x);
        let b = self.conv.forward(&a);
        let c = elu(&b);
        let y = x + &self.proj.forward(&c);
        (y, UnitCache { x: x.clone(), a, b, c })
    }

    fn backward(&mut self, cache: &UnitCache<T>, g: &Array2<T>) -> Array2<T> {
        let gc = self.proj.backward(&cache.c, g);
        let gb = elu_backward(&cache.b, &gc);
        let ga = self.conv.backward(&cache.a, &gb);
        g + &elu_backward(&cache.x, &ga)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv.params();
        p.extend(self.proj.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.conv.params_mut();
        p.extend(self.proj.params_mut());
        p
    }
}

/// Residual units followed by `elu -> block conv`.
#[derive(Debug, Clone)]
struct EncoderBlock<T> {
    units: Vec<ResUnit<T>>,
    conv: Conv1d<T>,
}

/// `elu -> block transpose conv` followed by residual units.
#[derive(Debug, Clone)]
struct DecoderBlock<T> {
    conv: ConvTranspose1d<T>,
    units: Vec<ResUnit<T>>,
}

struct BlockCache<T> {
    units: Vec<UnitCache<T>>,
    pre: Array2<T>,
    act: Array2<T>,
}

pub struct EncoderCache<T> {
    x: Array2<T>,
    blocks: Vec<BlockCache<T>>,
    pre_out: Array2<T>,
    act_out: Array2<T>,
}

pub type DecoderCache<T> = EncoderCache<T>;

/// Maps a `bins x frames` half-spectrum to `channels x frames` latents.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    conv_in: Conv1d<T>,
    blocks: Vec<EncoderBlock<T>>,
    conv_out: Conv1d<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: &EncoderConfig, in_channels: usize, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let blocks = (0..cfg.n_blocks)
            .map(|b| EncoderBlock {
                units: cfg
                    .dilations
                    .iter()
                    .enumerate()
                    .map(|(u, &d)| ResUnit {
                        conv: UnitConv::Dilated(Conv1d::new(&format!("encoder.block{b}.unit{u}.conv"), c, c, cfg.unit_kernel, d, Padding::Same, rng)),
                        proj: Conv1d::new(&format!("encoder.block{b}.unit{u}.proj"), c, c, 1, 1, Padding::Same, rng),
                    })
                    .collect(),
                conv: Conv1d::new(&format!("encoder.block{b}.conv"), c, c, cfg.block_kernel, 1, Padding::Causal, rng),
            })
            .collect();
        Self {
            conv_in: Conv1d::new("encoder.conv_in", in_channels, c, cfg.input_kernel, 1, Padding::Same, rng),
            blocks,
            conv_out: Conv1d::new("encoder.conv_out", c, c, cfg.output_kernel, 1, Padding::Same, rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv_in.in_channels()
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, EncoderCache<T>) {
        let mut h = self.conv_in.forward(x);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut units = Vec::with_capacity(block.units.len());
            for unit in &block.units {
                let (y, cache) = unit.forward(&h);
                units.push(cache);
                h = y;
            }
            let act = elu(&h);
            let out = block.conv.forward(&act);
            blocks.push(BlockCache { units, pre: h, act });
            h = out;
        }
        let act_out = elu(&h);
        let y = self.conv_out.forward(&act_out);
        (
            y,
            EncoderCache {
                x: x.clone(),
                blocks,
                pre_out: h,
                act_out,
            },
        )
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &EncoderCache<T>, grad: &Array2<T>) -> Array2<T> {
        let g = self.conv_out.backward(&cache.act_out, grad);
        let mut g = elu_backward(&cache.pre_out, &g);
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            let ga = block.conv.backward(&bc.act, &g);
            g = elu_backward(&bc.pre, &ga);
            for (unit, uc) in block.units.iter_mut().zip(&bc.units).rev() {
                g = unit.backward(uc, &g);
            }
        }
        self.conv_in.backward(&cache.x, &g)
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv_in.params();
        for b in &self.blocks {
            for u in &b.units {
                p.extend(u.params());
            }
            p.extend(b.conv.params());
        }
        p.extend(self.conv_out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.conv_in.params_mut();
        for b in &mut self.blocks {
            for u in &mut b.units {
                p.extend(u.params_mut());
            }
            p.extend(b.conv.params_mut());
        }
        p.extend(self.conv_out.params_mut());
        p
    }
}

/// Mirror of [`Encoder`] with transposed convolutions.
#[derive(Debug, Clone)]
pub struct Decoder<T> {
    conv_in: Conv1d<T>,
    blocks: Vec<DecoderBlock<T>>,
    conv_out: Conv1d<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(cfg: &EncoderConfig, out_channels: usize, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let blocks = (0..cfg.n_blocks)
            .map(|b| DecoderBlock {
                conv: ConvTranspose1d::new(&format!("decoder.block{b}.conv"), c, c, cfg.block_kernel, 1, Padding::Causal, rng),
                units: (0..cfg.units_per_block)
                    .map(|u| ResUnit {
                        conv: UnitConv::Transposed(ConvTranspose1d::new(&format!("decoder.block{b}.unit{u}.conv"), c, c, cfg.unit_kernel, 1, Padding::Same, rng)),
                        proj: Conv1d::new(&format!("decoder.block{b}.unit{u}.proj"), c, c, 1, 1, Padding::Same, rng),
                    })
                    .collect(),
            })
            .collect();
        let mut conv_out = Conv1d::new("decoder.conv_out", c, out_channels, cfg.input_kernel, 1, Padding::Same, rng);
        conv_out.zero_init();
        Self {
            conv_in: Conv1d::new("decoder.conv_in", c, c, cfg.output_kernel, 1, Padding::Same, rng),
            blocks,
            conv_out,
        }
    }

    /// Replaces the zero-initialized output layer with random weights.
    pub fn randomize_output(&mut self, rng: &mut impl Rng) {
        let fan_in = self.conv_out.weight.value.shape()[1];
        let bound = 1.0 / (fan_in as f64).sqrt();
        for p in self.conv_out.params_mut() {
            p.value.mapv_inplace(|_| T::lit(rng.random_range(-bound..=bound)));
        }
    }

    pub fn forward(&self, z: &Array2<T>) -> (Array2<T>, DecoderCache<T>) {
        let mut h = self.conv_in.forward(z);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let act = elu(&h);
            let pre = std::mem::replace(&mut h, block.conv.forward(&act));
            let mut units = Vec::with_capacity(block.units.len());
            for unit in &block.units {
                let (y, cache) = unit.forward(&h);
                units.push(cache);
                h = y;
            }
            blocks.push(BlockCache { units, pre, act });
        }
        let act_out = elu(&h);
        let y = self.conv_out.forward(&act_out);
        (
            y,
            EncoderCache {
                x: z.clone(),
                blocks,
                pre_out: h,
                act_out,
            },
        )
    }

    pub fn backward(&mut self, cache: &DecoderCache<T>, grad: &Array2<T>) -> Array2<T> {
        let g = self.conv_out.backward(&cache.act_out, grad);
        let mut g = elu_backward(&cache.pre_out, &g);
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            for (unit, uc) in block.units.iter_mut().zip(&bc.units).rev() {
                g = unit.backward(uc, &g);
            }
            let ga = block.conv.backward(&bc.act, &g);
            g = elu_backward(&bc.pre, &ga);
        }
        self.conv_in.backward(&cache.x, &g)
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv_in.params();
        for b in &self.blocks {
            p.extend(b.conv.params());
            for u in &b.units {
                p.extend(u.params());
            }
        }
        p.extend(self.conv_out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.conv_in.params_mut();
        for b in &mut self.blocks {
            p.extend(b.conv.params_mut());
            for u in &mut b.units {
                p.extend(u.params_mut());
            }
        }
        p.extend(self.conv_out.params_mut());
        p
    }
}

pub const CODEC_MAGIC: [u8; 4] = *b"CPXM";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    Rvq,
    /// Latents pass to the decoder unquantized.
    Bypass,
}

/// Everything the loss needs from one pass through the codec.
pub struct CodecOutput<T> {
    pub wave_hat: Vec<T>,
    pub spec: ComplexSpectrogram<T>,
    pub spec_hat: ComplexSpectrogram<T>,
    pub vq_loss: T,
    pub real_indices: Option<Array2<usize>>,
    pub imag_indices: Option<Array2<usize>>,
}

/// Code indices of one utterance, `frames x stages` per branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codes {
    pub real: Array2<usize>,
    pub imag: Array2<usize>,
    pub n_samples: usize,
}

pub struct CodecModel<T: Scalar> {
    pub config: CodecConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub real_rvq: RvqStack<T>,
    pub imag_rvq: RvqStack<T>,
    plan: StftPlan<T>,
}

impl<T: Scalar> std::fmt::Debug for CodecModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CodecModel").field("config", &self.config).finish_non_exhaustive()
    }
}

impl<T: Scalar> Clone for CodecModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            real_rvq: self.real_rvq.clone(),
            imag_rvq: self.imag_rvq.clone(),
            plan: StftPlan::new(self.config.stft_config()).expect("validated config"),
        }
    }
}

/// `frames x bins` half-spectrum as a `bins x frames` channel sequence.
fn channels_first<T: Scalar>(spec: &Array2<Complex<T>>, imag: bool) -> Array2<T> {
    spec.t().mapv(|c| if imag { c.im } else { c.re })
}

impl<T: Scalar> CodecModel<T> {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bins = config.n_bins();
        Ok(Self {
            encoder: Encoder::new(&config.encoder, bins, &mut rng),
            decoder: Decoder::new(&config.encoder, bins, &mut rng),
            real_rvq: RvqStack::new(&config.vq_config(config.n_stages_real)),
            imag_rvq: RvqStack::new(&config.vq_config(config.n_stages_imag)),
            plan: StftPlan::new(config.stft_config())?,
            config,
        })
    }

    pub fn plan(&self) -> &StftPlan<T> {
        &self.plan
    }

    pub fn analyze(&self, wave: &[T]) -> Result<ComplexSpectrogram<T>> {
        Ok(ComplexSpectrogram {
            data: self.plan.forward(wave)?,
            config: self.config.stft_config(),
        })
    }

    pub fn synthesize(&self, spec: &ComplexSpectrogram<T>, n_samples: usize) -> Result<Vec<T>> {
        self.plan.inverse(&spec.data, n_samples)
    }

    fn check_bins(&self, spec: &ComplexSpectrogram<T>) -> Result<()> {
        if spec.n_bins() != self.config.n_bins() {
            return Err(Error::shape("codec input bins", self.config.n_bins(), spec.n_bins()));
        }
        Ok(())
    }

    /// Shared-weight encoding of both branches into `frames x latent_dim` matrices.
    pub fn encode(&self, spec: &ComplexSpectrogram<T>) -> Result<(Array2<T>, Array2<T>)> {
        self.check_bins(spec)?;
        let re = self.encoder.forward(&channels_first(&spec.data, false)).0;
        let im = self.encoder.forward(&channels_first(&spec.data, true)).0;
        Ok((re.reversed_axes(), im.reversed_axes()))
    }

    pub fn decode(&self, real_q: &Array2<T>, imag_q: &Array2<T>) -> Result<ComplexSpectrogram<T>> {
        if real_q.dim() != imag_q.dim() {
            return Err(Error::shape("decoder latents", real_q.dim(), imag_q.dim()));
        }
        if real_q.ncols() != self.config.latent_dim() {
            return Err(Error::shape("decoder latent dim", self.config.latent_dim(), real_q.ncols()));
        }
        let re = self.decoder.forward(&real_q.t().to_owned()).0;
        let im = self.decoder.forward(&imag_q.t().to_owned()).0;
        ComplexSpectrogram::from_parts(&re.reversed_axes(), &im.reversed_axes(), self.config.stft_config())
    }

    /// STFT, encoding and quantization of a waveform.
    pub fn encode_wave(&self, wave: &[T]) -> Result<Codes> {
        let spec = self.analyze(wave)?;
        let (re, im) = self.encode(&spec)?;
        Ok(Codes {
            real: self.real_rvq.encode(re.view())?.indices,
            imag: self.imag_rvq.encode(im.view())?.indices,
            n_samples: wave.len(),
        })
    }

    /// Decoded spectrum of a set of codes.
    pub fn decode_codes(&self, codes: &Codes) -> Result<ComplexSpectrogram<T>> {
        let re = self.real_rvq.decode(codes.real.view())?;
        let im = self.imag_rvq.decode(codes.imag.view())?;
        self.decode(&re, &im)
    }

    pub fn decode_wave(&self, codes: &Codes) -> Result<Vec<T>> {
        self.synthesize(&self.decode_codes(codes)?, codes.n_samples)
    }

    /// Full pass with frozen codebooks.
    pub fn codec_forward(&self, wave: &[T], mode: QuantizeMode) -> Result<CodecOutput<T>> {
        let spec = self.analyze(wave)?;
        let (re, im) = self.encode(&spec)?;
        let (qr, qi, vq, ri, ii) = match mode {
            QuantizeMode::Bypass => (re.clone(), im.clone(), T::zero(), None, None),
            QuantizeMode::Rvq => {
                let r = self.real_rvq.encode(re.view())?;
                let i = self.imag_rvq.encode(im.view())?;
                let vq = (commitment_loss(re.view(), r.quantized.view())? + commitment_loss(im.view(), i.quantized.view())?) / T::lit(2.0);
                (r.quantized, i.quantized, vq, Some(r.indices), Some(i.indices))
            }
        };
        let spec_hat = self.decode(&qr, &qi)?;
        let wave_hat = self.synthesize(&spec_hat, wave.len())?;
        Ok(CodecOutput {
            wave_hat,
            spec,
            spec_hat,
            vq_loss: vq,
            real_indices: ri,
            imag_indices: ii,
        })
    }

    /// Loss of a batch of equal-length segments without touching gradients
    /// or codebooks.
    pub fn batch_loss(&self, batch: &[Vec<T>], mode: QuantizeMode, mel: &MultiResMelLoss<T>) -> Result<LossReport> {
        let mut terms = LossTerms::default();
        let b = batch.len() as f64;
        if batch.is_empty() {
            return Err(Error::EmptyInput("training batch"));
        }
        // the commitment term is a mean over all latents of the batch
        let mut vq = Vec::new();
        for wave in batch {
            let out = self.codec_forward(wave, mode)?;
            terms.mse += complex_mse(&out.spec.data, &out.spec_hat.data)?.as_f64() / b;
            terms.mae += complex_mae(&out.spec.data, &out.spec_hat.data)?.as_f64() / b;
            terms.mel += mel.loss(wave, &out.wave_hat)?.as_f64() / b;
            vq.push(out.vq_loss.as_f64());
        }
        terms.vq = vq.iter().sum::<f64>() / b;
        total_loss(terms, &self.config.loss_weights)
    }

    /// One forward/backward pass over a batch of equal-length segments.
    ///
    /// Parameter gradients are reset and then hold the gradient of the mean
    /// total loss. Gradients reach the encoder through the quantizer
    /// unchanged (straight-through). When `ema_rng` is given the codebooks
    /// are initialized on first use and EMA-updated with this batch.
    pub fn forward_backward(
        &mut self,
        batch: &[Vec<T>],
        mode: QuantizeMode,
        mel: &MultiResMelLoss<T>,
        ema_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("training batch"));
        }
        self.encoder.zero_grad();
        self.decoder.zero_grad();
        let weights = self.config.loss_weights;
        let b = batch.len();
        let bt = T::from_usize_lossy(b);

        let mut specs = Vec::with_capacity(b);
        let mut enc_caches = Vec::with_capacity(b);
        let (mut zr, mut zi) = (Vec::with_capacity(b), Vec::with_capacity(b));
        for wave in batch {
            let spec = self.analyze(wave)?;
            let (r, cr) = self.encoder.forward(&channels_first(&spec.data, false));
            let (i, ci) = self.encoder.forward(&channels_first(&spec.data, true));
            zr.push(r.reversed_axes());
            zi.push(i.reversed_axes());
            enc_caches.push((cr, ci));
            specs.push(spec);
        }
        let frames: Vec<usize> = zr.iter().map(|z| z.nrows()).collect();
        let cat = |zs: &[Array2<T>]| concatenate(Axis(0), &zs.iter().map(|z| z.view()).collect::<Vec<_>>()).expect("equal latent dims");
        let (all_r, all_i) = (cat(&zr), cat(&zi));

        let (qr, qi) = match mode {
            QuantizeMode::Bypass => (all_r.clone(), all_i.clone()),
            QuantizeMode::Rvq => match ema_rng {
                Some(rng) => {
                    let after = self.config.dead_after;
                    (
                        self.real_rvq.train_step(all_r.view(), after, rng)?.quantized,
                        self.imag_rvq.train_step(all_i.view(), after, rng)?.quantized,
                    )
                }
                None => (
                    self.real_rvq.encode(all_r.view())?.quantized,
                    self.imag_rvq.encode(all_i.view())?.quantized,
                ),
            },
        };
        let two = T::lit(2.0);
        let vq = (commitment_loss(all_r.view(), qr.view())? + commitment_loss(all_i.view(), qi.view())?) / two;
        let w_vq = T::lit(weights.vq) / two;
        let gz_r = commitment_grad(all_r.view(), qr.view()) * w_vq;
        let gz_i = commitment_grad(all_i.view(), qi.view()) * w_vq;

        let mut terms = LossTerms {
            vq: vq.as_f64(),
            ..LossTerms::default()
        };
        let (w_mse, w_mae, w_mel) = (T::lit(weights.mse), T::lit(weights.mae), T::lit(weights.mel));
        let mut offset = 0;
        for (k, wave) in batch.iter().enumerate() {
            let rows = s![offset..offset + frames[k], ..];
            offset += frames[k];
            let (q_r, q_i) = (qr.slice(rows).t().to_owned(), qi.slice(rows).t().to_owned());
            let (xr, dr) = self.decoder.forward(&q_r);
            let (xi, di) = self.decoder.forward(&q_i);
            let spec_hat = ComplexSpectrogram::from_parts(&xr.t().to_owned(), &xi.t().to_owned(), self.config.stft_config())?;
            let wave_hat = self.synthesize(&spec_hat, wave.len())?;
            let x = &specs[k].data;
            let x_hat = &spec_hat.data;

            let (mel_l, mel_g) = mel.loss_and_grad(wave, &wave_hat)?;
            terms.mse += complex_mse(x, x_hat)?.as_f64() / b as f64;
            terms.mae += complex_mae(x, x_hat)?.as_f64() / b as f64;
            terms.mel += mel_l.as_f64() / b as f64;

            let mut g_spec = complex_mse_grad(x, x_hat)?.mapv(|c| c * w_mse);
            g_spec.zip_mut_with(&complex_mae_grad(x, x_hat)?, |a, &b| *a = *a + b * w_mae);
            let g_wave: Vec<T> = mel_g.iter().map(|&g| g * w_mel).collect();
            g_spec = g_spec + self.plan.inverse_adjoint(&g_wave, x.nrows())?;
            g_spec.mapv_inplace(|c| c / bt);

            let g_qr = self.decoder.backward(&dr, &channels_first(&g_spec, false));
            let g_qi = self.decoder.backward(&di, &channels_first(&g_spec, true));
            let g_zr = g_qr + &gz_r.slice(rows).t();
            let g_zi = g_qi + &gz_i.slice(rows).t();
            let (cr, ci) = &enc_caches[k];
            self.encoder.backward(cr, &g_zr);
            self.encoder.backward(ci, &g_zi);
        }
        total_loss(terms, &weights)
    }

    /// Archive with the config, all weights and (once trained) both codebook stacks.
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new(CODEC_MAGIC, &self.config)?;
        a.push_params(self.params());
        for (name, stack, branch) in [("rvq.real", &self.real_rvq, Branch::Real), ("rvq.imag", &self.imag_rvq, Branch::Imag)] {
            if stack.is_initialized() {
                let mut bytes = Vec::new();
                write_codebooks(&mut bytes, stack, branch).map_err(|e| Error::Format(e.to_string()))?;
                a.blobs.push((name.into(), bytes));
            }
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let config: CodecConfig = a.config()?;
        let mut model = Self::new(config, 0)?;
        a.load_params(model.params_mut())?;
        let (decay, eps) = (model.config.ema_decay, model.config.ema_eps);
        for (name, expected) in [("rvq.real", Branch::Real), ("rvq.imag", Branch::Imag)] {
            let Ok(bytes) = a.blob(name) else { continue };
            let (stack, branch) = read_codebooks::<T>(bytes, decay, eps)?;
            let slot = if expected == Branch::Real { &mut model.real_rvq } else { &mut model.imag_rvq };
            if branch != expected || stack.n_stages() != slot.n_stages() || stack.dim() != slot.dim() {
                return Err(Error::Format(format!("codebook blob `{name}` does not match the config")));
            }
            *slot = stack;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path, CODEC_MAGIC)?)
    }

    /// Encoder then decoder parameters, in checkpoint order.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_spec(frames: usize, seed: u64) -> ComplexSpectrogram<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ComplexSpectrogram::zeros(frames, CodecConfig::default().stft_config());
        s.data.mapv_inplace(|_| Complex::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)));
        s
    }

    fn tone(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len)
            .map(|n| {
                let t = n as f64 / 48_000.0;
                0.4 * (2.0 * std::f64::consts::PI * 300.0 * t).sin() + 0.2 * (2.0 * std::f64::consts::PI * 1250.0 * t).sin() + 0.02 * rng.random_range(-1.0..1.0)
            })
            .collect()
    }

    #[test]
    fn frame_count_is_preserved() {
        let model = CodecModel::<f64>::new(CodecConfig::tiny(), 0).unwrap();
        for frames in [1, 7, 150] {
            let (re, im) = model.encode(&random_spec(frames, frames as u64)).unwrap();
            assert_eq!(re.dim(), (frames, 8));
            assert_eq!(im.dim(), (frames, 8));
            let out = model.decode(&re, &im).unwrap();
            assert_eq!(out.data.dim(), (frames, 256));
        }
    }

    #[test]
    fn branches_share_weights() {
        let model = CodecModel::<f64>::new(CodecConfig::tiny(), 1).unwrap();
        let spec = random_spec(20, 2);
        let (re, _) = model.encode(&spec).unwrap();
        let swapped = ComplexSpectrogram::from_parts(&spec.imag(), &spec.real(), spec.config).unwrap();
        let (_, im_of_real) = model.encode(&swapped).unwrap();
        assert_eq!(re, im_of_real);
    }

    #[test]
    fn encoder_receptive_field_matches_impulse_response() {
        let cfg = CodecConfig::tiny();
        assert_eq!(cfg.encoder.receptive_field(), (164, 160));
        let model = CodecModel::<f64>::new(cfg, 2).unwrap();
        let frames = 400;
        let base = random_spec(frames, 3);
        let (z0, _) = model.encode(&base).unwrap();
        let t = 200;
        let mut bumped = base.clone();
        for k in 0..256 {
            bumped.data[[t, k]].re += 1.0;
        }
        let (z1, _) = model.encode(&bumped).unwrap();
        let changed: Vec<usize> = (0..frames)
            .filter(|&u| z0.row(u).iter().zip(z1.row(u)).any(|(a, b)| a != b))
            .collect();
        // input frame t reaches outputs from t - right ..= t + left
        assert_eq!(*changed.first().unwrap(), t - 160);
        assert_eq!(*changed.last().unwrap(), t + 164);
    }

    #[test]
    fn zero_initialized_decoder_outputs_zero() {
        let model = CodecModel::<f64>::new(CodecConfig::tiny(), 3).unwrap();
        let z = Array2::zeros((9, 8));
        let out = model.decode(&z, &z).unwrap();
        assert!(out.data.iter().all(|c| c.re == 0.0 && c.im == 0.0));
    }

    #[test]
    fn bin_and_frame_mismatches_are_errors() {
        let model = CodecModel::<f64>::new(CodecConfig::tiny(), 4).unwrap();
        let bad = ComplexSpectrogram::<f64>::zeros(5, StftConfig { fft_size: 512, ..CodecConfig::default().stft_config() });
        assert!(model.encode(&bad).is_err());
        assert!(model.decode(&Array2::zeros((4, 8)), &Array2::zeros((5, 8))).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_length_preserving() {
        let mut model = CodecModel::<f32>::new(CodecConfig::tiny(), 5).unwrap();
        model.decoder.randomize_output(&mut ChaCha8Rng::seed_from_u64(9));
        let wave: Vec<f32> = tone(4321, 6).into_iter().map(|v| v as f32).collect();
        let a = model.codec_forward(&wave, QuantizeMode::Bypass).unwrap();
        let b = model.codec_forward(&wave, QuantizeMode::Bypass).unwrap();
        assert_eq!(a.wave_hat.len(), wave.len());
        assert_eq!(a.wave_hat, b.wave_hat);
    }

    #[test]
    fn quantization_does_not_beat_bypass() {
        let mut model = CodecModel::<f64>::new(CodecConfig::tiny(), 6).unwrap();
        model.decoder.randomize_output(&mut ChaCha8Rng::seed_from_u64(1));
        let mel = MultiResMelLoss::standard(48_000).unwrap();
        let batch = vec![tone(9600, 7)];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut adam = crate::nn::Adam::new(crate::nn::AdamConfig { lr: 1e-3, ..Default::default() });
        for _ in 0..60 {
            model.forward_backward(&batch, QuantizeMode::Rvq, &mel, Some(&mut rng)).unwrap();
            adam.step(model.params_mut());
        }
        let bypass = model.batch_loss(&batch, QuantizeMode::Bypass, &mel).unwrap();
        let quantized = model.batch_loss(&batch, QuantizeMode::Rvq, &mel).unwrap();
        assert!(bypass.total <= quantized.total, "{bypass:?} vs {quantized:?}");
    }

    fn check_gradients(model: &mut CodecModel<f64>, mode: QuantizeMode, pick: &[(usize, usize)]) {
        let mel = MultiResMelLoss::standard(48_000).unwrap();
        let batch = vec![tone(4800, 11), tone(4800, 12)];
        let report = model.forward_backward(&batch, mode, &mel, None).unwrap();
        let loss0 = model.batch_loss(&batch, mode, &mel).unwrap().total;
        assert!((report.total - loss0).abs() < 1e-9 * loss0.abs());
        let grads: Vec<f64> = pick
            .iter()
            .map(|&(p, i)| model.params()[p].grad.as_slice().unwrap()[i])
            .collect();
        // fourth-order central stencil; the loss has enough curvature and
        // roundoff that a plain two-point difference is not reliable to 1e-3
        let h = 1e-4;
        for (&(p, i), &bp) in pick.iter().zip(&grads) {
            let mut eval = |delta: f64| {
                model.params_mut()[p].value.as_slice_mut().unwrap()[i] += delta;
                let l = model.batch_loss(&batch, mode, &mel).unwrap().total;
                model.params_mut()[p].value.as_slice_mut().unwrap()[i] -= delta;
                l
            };
            let fd = (8.0 * (eval(h) - eval(-h)) - (eval(2.0 * h) - eval(-2.0 * h))) / (12.0 * h);
            let rel = (fd - bp).abs() / fd.abs().max(bp.abs()).max(1e-8);
            assert!(rel < 1e-3, "{}[{i}]: fd {fd} vs backprop {bp}", model.params()[p].name);
        }
    }

    fn sample_weights(model: &CodecModel<f64>, range: std::ops::Range<usize>, n: usize, seed: u64) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let p = rng.random_range(range.clone());
                (p, rng.random_range(0..model.params()[p].len()))
            })
            .collect()
    }

    #[test]
    fn backprop_matches_finite_differences_without_quantizer() {
        let mut model = CodecModel::<f64>::new(CodecConfig::tiny(), 7).unwrap();
        model.decoder.randomize_output(&mut ChaCha8Rng::seed_from_u64(3));
        let n = model.params().len();
        let pick = sample_weights(&model, 0..n, 10, 4);
        check_gradients(&mut model, QuantizeMode::Bypass, &pick);
    }

    #[test]
    fn decoder_gradients_match_finite_differences_with_quantizer() {
        let mut model = CodecModel::<f64>::new(CodecConfig::tiny(), 8).unwrap();
        model.decoder.randomize_output(&mut ChaCha8Rng::seed_from_u64(5));
        let mel = MultiResMelLoss::standard(48_000).unwrap();
        model
            .forward_backward(&[tone(4800, 13)], QuantizeMode::Rvq, &mel, Some(&mut ChaCha8Rng::seed_from_u64(6)))
            .unwrap();
        let n_enc = model.encoder.params().len();
        let pick = sample_weights(&model, n_enc..model.params().len(), 10, 7);
        check_gradients(&mut model, QuantizeMode::Rvq, &pick);
    }
    #[test]
    fn checkpoint_round_trip() {
        let mut model = CodecModel::<f32>::new(CodecConfig::tiny(), 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let fresh = dir.path().join("fresh.cpxm");
        model.save(&fresh).unwrap();
        assert!(!CodecModel::<f32>::load(&fresh).unwrap().real_rvq.is_initialized());
        model.decoder.randomize_output(&mut ChaCha8Rng::seed_from_u64(1));
        let mel = MultiResMelLoss::standard(48_000).unwrap();
        let wave: Vec<f32> = tone(4800, 3).into_iter().map(|v| v as f32).collect();
        model.forward_backward(&[wave.clone()], QuantizeMode::Rvq, &mel, Some(&mut ChaCha8Rng::seed_from_u64(2))).unwrap();
        let path = dir.path().join("model.cpxm");
        model.save(&path).unwrap();
        let back = CodecModel::<f32>::load(&path).unwrap();
        assert_eq!(back.config, model.config);
        let codes = model.encode_wave(&wave).unwrap();
        assert_eq!(back.encode_wave(&wave).unwrap(), codes);
        assert_eq!(back.decode_wave(&codes).unwrap(), model.decode_wave(&codes).unwrap());
    }
}
