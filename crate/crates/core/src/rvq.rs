//! Residual vector quantization with EMA-learned codebooks.
//!
//! Each branch (real / imaginary) owns an [`RvqStack`] of independent
//! codebooks. Stage `s` quantizes the residual left by stages `0..s`; the
//! decoded latent is the sum of the selected entries.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// Quantizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqConfig {
    pub bits: u8,
    pub dim: usize,
    pub n_stages: usize,
    pub decay: f64,
    /// Laplace smoothing added to each cluster size.
    pub eps: f64,
    /// Codes unused for this many consecutive batches are reseeded.
    pub dead_after: u32,
}

impl VqConfig {
    pub fn codebook_size(&self) -> usize {
        1 << self.bits
    }
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            bits: 10,
            dim: 256,
            n_stages: 8,
            decay: 0.99,
            eps: 1e-5,
            dead_after: 200,
        }
    }
}

/// Which half of the complex spectrum a stack quantizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Real = 0,
    Imag = 1,
}

impl Branch {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Branch::Real),
            1 => Ok(Branch::Imag),
            other => Err(Error::Format(format!("unknown branch tag {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Codebook<T> {
    /// `K x D`
    pub entries: Array2<T>,
    pub ema_cluster_size: Array1<T>,
    /// `K x D`
    pub ema_embed_sum: Array2<T>,
    pub decay: f64,
    pub eps: f64,
    idle_batches: Vec<u32>,
    initialized: bool,
}

impl<T: Scalar> Codebook<T> {
    /// All-zero codebook awaiting data-driven initialization.
    pub fn zeros(size: usize, dim: usize, decay: f64, eps: f64) -> Self {
        let mut cb = Self::from_entries(Array2::zeros((size, dim)), decay, eps);
        cb.initialized = false;
        cb
    }

    /// Codebook with the given entries and EMA statistics consistent with them.
    pub fn from_entries(entries: Array2<T>, decay: f64, eps: f64) -> Self {
        let k = entries.nrows();
        Self {
            ema_cluster_size: Array1::ones(k),
            ema_embed_sum: entries.clone(),
            entries,
            decay,
            eps,
            idle_batches: vec![0; k],
            initialized: true,
        }
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Index of the closest entry (lowest index on ties) and its squared distance.
    pub fn nearest(&self, v: ArrayView1<T>) -> Result<(usize, T)> {
        if self.size() == 0 {
            return Err(Error::EmptyCodebook);
        }
        if v.len() != self.dim() {
            return Err(Error::shape("vq input", self.dim(), v.len()));
        }
        let mut best = (0, T::infinity());
        for (k, e) in self.entries.outer_iter().enumerate() {
            let mut d = T::zero();
            for (&a, &b) in v.iter().zip(e.iter()) {
                let diff = a - b;
                d += diff * diff;
            }
            if d < best.1 {
                best = (k, d);
            }
        }
        Ok(best)
    }

    /// Seeds the entries with rows of `vectors`, without replacement when
    /// there are enough rows.
    pub fn init_from(&mut self, vectors: ArrayView2<T>, rng: &mut impl Rng) {
        let n = vectors.nrows();
        if n == 0 {
            return;
        }
        let k = self.size();
        let rows: Vec<usize> = if n >= k {
            index::sample(rng, n, k).into_vec()
        } else {
            (0..k).map(|_| rng.random_range(0..n)).collect()
        };
        for (dst, &src) in rows.iter().enumerate() {
            self.entries.row_mut(dst).assign(&vectors.row(src));
        }
        self.ema_embed_sum.assign(&self.entries);
        self.ema_cluster_size.fill(T::one());
        self.idle_batches.fill(0);
        self.initialized = true;
    }

    /// One EMA step from a batch of `vectors` assigned to `assignments`.
    /// Entries of codes without assignments in this batch are left untouched.
    pub fn ema_update(&mut self, vectors: ArrayView2<T>, assignments: &[usize]) -> Result<()> {
        if vectors.nrows() != assignments.len() {
            return Err(Error::shape("ema assignments", vectors.nrows(), assignments.len()));
        }
        if vectors.ncols() != self.dim() {
            return Err(Error::shape("ema vectors", self.dim(), vectors.ncols()));
        }
        let k = self.size();
        let mut counts = Array1::<T>::zeros(k);
        let mut sums = Array2::<T>::zeros((k, self.dim()));
        for (row, &a) in vectors.outer_iter().zip(assignments) {
            if a >= k {
                return Err(Error::IndexOutOfRange { index: a, size: k });
            }
            counts[a] += T::one();
            let mut dst = sums.row_mut(a);
            dst += &row;
        }
        let decay = T::lit(self.decay);
        let keep = T::one() - decay;
        Zip::from(&mut self.ema_cluster_size)
            .and(&counts)
            .for_each(|c, &n| *c = decay * *c + keep * n);
        Zip::from(&mut self.ema_embed_sum)
            .and(&sums)
            .for_each(|e, &s| *e = decay * *e + keep * s);

        let total = self.ema_cluster_size.sum();
        let eps = T::lit(self.eps);
        let kf = T::from_usize_lossy(k);
        for j in 0..k {
            if counts[j] > T::zero() {
                self.idle_batches[j] = 0;
                let smoothed = (self.ema_cluster_size[j] + eps) / (total + kf * eps) * total;
                let sum = self.ema_embed_sum.row(j).to_owned();
                self.entries.row_mut(j).assign(&(sum / smoothed));
            } else {
                self.idle_batches[j] = self.idle_batches[j].saturating_add(1);
            }
        }
        Ok(())
    }

    /// Reseeds codes idle for at least `threshold` batches from random rows of
    /// `vectors`. Returns how many codes were revived.
    pub fn revive_dead_codes(&mut self, vectors: ArrayView2<T>, threshold: u32, rng: &mut impl Rng) -> usize {
        if vectors.nrows() == 0 {
            return 0;
        }
        let mut revived = 0;
        for j in 0..self.size() {
            if self.idle_batches[j] >= threshold {
                let src = vectors.row(rng.random_range(0..vectors.nrows()));
                self.entries.row_mut(j).assign(&src);
                self.ema_embed_sum.row_mut(j).assign(&src);
                self.ema_cluster_size[j] = T::one();
                self.idle_batches[j] = 0;
                revived += 1;
            }
        }
        revived
    }
}

/// Nearest codebook entry to `vector`.
pub fn vq_nearest<T: Scalar>(vector: ArrayView1<T>, codebook: &Codebook<T>) -> Result<(usize, Array1<T>)> {
    let (k, _) = codebook.nearest(vector)?;
    Ok((k, codebook.entries.row(k).to_owned()))
}

/// Output of [`RvqStack::encode`].
#[derive(Debug, Clone)]
pub struct QuantizationResult<T> {
    /// `frames x stages`
    pub indices: Array2<usize>,
    /// `frames x D`
    pub quantized: Array2<T>,
    /// Total squared residual norm after each stage.
    pub residual_energy_per_stage: Vec<T>,
    /// Residual entering each stage (`frames x D` each); what EMA learns from.
    pub stage_inputs: Vec<Array2<T>>,
}

#[derive(Debug, Clone)]
pub struct RvqStack<T> {
    pub stages: Vec<Codebook<T>>,
}

impl<T: Scalar> RvqStack<T> {
    pub fn new(cfg: &VqConfig) -> Self {
        Self {
            stages: (0..cfg.n_stages)
                .map(|_| Codebook::zeros(cfg.codebook_size(), cfg.dim, cfg.decay, cfg.eps))
                .collect(),
        }
    }

    pub fn from_stages(stages: Vec<Codebook<T>>) -> Result<Self> {
        if let Some(first) = stages.first() {
            let dim = first.dim();
            if let Some(bad) = stages.iter().find(|s| s.dim() != dim) {
                return Err(Error::shape("rvq stage dims", dim, bad.dim()));
            }
        }
        Ok(Self { stages })
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn dim(&self) -> usize {
        self.stages.first().map_or(0, |s| s.dim())
    }

    pub fn is_initialized(&self) -> bool {
        self.stages.iter().all(|s| s.is_initialized())
    }

    /// Quantizes `frames x D` latents with the current codebooks.
    pub fn encode(&self, latents: ArrayView2<T>) -> Result<QuantizationResult<T>> {
        if latents.ncols() != self.dim() {
            return Err(Error::shape("rvq latents", self.dim(), latents.ncols()));
        }
        let frames = latents.nrows();
        let mut residual = latents.to_owned();
        let mut quantized = Array2::zeros(latents.raw_dim());
        let mut indices = Array2::zeros((frames, self.n_stages()));
        let mut energies = Vec::with_capacity(self.n_stages());
        let mut inputs = Vec::with_capacity(self.n_stages());
        for (s, stage) in self.stages.iter().enumerate() {
            inputs.push(residual.clone());
            for t in 0..frames {
                let (k, _) = stage.nearest(residual.row(t))?;
                indices[[t, s]] = k;
                let entry = stage.entries.row(k);
                let mut q = quantized.row_mut(t);
                q += &entry;
                let mut r = residual.row_mut(t);
                r -= &entry;
            }
            energies.push(residual.iter().map(|&v| v * v).sum());
        }
        Ok(QuantizationResult {
            indices,
            quantized,
            residual_energy_per_stage: energies,
            stage_inputs: inputs,
        })
    }

    /// Seeds every uninitialized stage from the residual it would see.
    pub fn init_from(&mut self, latents: ArrayView2<T>, rng: &mut impl Rng) -> Result<()> {
        let mut residual = latents.to_owned();
        for stage in self.stages.iter_mut() {
            if !stage.is_initialized() {
                stage.init_from(residual.view(), rng);
            }
            for t in 0..residual.nrows() {
                let (k, _) = stage.nearest(residual.row(t))?;
                let mut r = residual.row_mut(t);
                r -= &stage.entries.row(k);
            }
        }
        Ok(())
    }

    /// Training-mode encode: initializes untouched stages from the data,
    /// quantizes, then applies one EMA update (and dead-code revival) per stage.
    pub fn train_step(&mut self, latents: ArrayView2<T>, revive_after: u32, rng: &mut impl Rng) -> Result<QuantizationResult<T>> {
        if !self.is_initialized() {
            self.init_from(latents, rng)?;
        }
        let result = self.encode(latents)?;
        for (s, stage) in self.stages.iter_mut().enumerate() {
            let assign: Vec<usize> = result.indices.column(s).to_vec();
            stage.ema_update(result.stage_inputs[s].view(), &assign)?;
            stage.revive_dead_codes(result.stage_inputs[s].view(), revive_after, rng);
        }
        Ok(result)
    }

    /// Sums the addressed entries: `indices` is `frames x stages`.
    pub fn decode(&self, indices: ArrayView2<usize>) -> Result<Array2<T>> {
        if indices.ncols() != self.n_stages() {
            return Err(Error::shape("rvq indices", self.n_stages(), indices.ncols()));
        }
        let mut out = Array2::zeros((indices.nrows(), self.dim()));
        for (s, stage) in self.stages.iter().enumerate() {
            for (t, &k) in indices.column(s).iter().enumerate() {
                if k >= stage.size() {
                    return Err(Error::IndexOutOfRange {
                        index: k,
                        size: stage.size(),
                    });
                }
                let mut row = out.row_mut(t);
                row += &stage.entries.row(k);
            }
        }
        Ok(out)
    }

    /// Perplexity of code usage per stage for a set of indices.
    pub fn perplexity(&self, indices: ArrayView2<usize>) -> Vec<f64> {
        (0..indices.ncols())
            .map(|s| {
                let size = self.stages[s].size();
                let mut counts = vec![0usize; size];
                for &k in indices.column(s) {
                    counts[k.min(size - 1)] += 1;
                }
                let n = indices.nrows().max(1) as f64;
                let entropy: f64 = counts
                    .iter()
                    .filter(|&&c| c > 0)
                    .map(|&c| {
                        let p = c as f64 / n;
                        -p * p.ln()
                    })
                    .sum();
                entropy.exp()
            })
            .collect()
    }
}

/// Mean squared distance between latents and their (constant) quantized targets.
pub fn commitment_loss<T: Scalar>(latents: ArrayView2<T>, quantized: ArrayView2<T>) -> Result<T> {
    if latents.dim() != quantized.dim() {
        return Err(Error::shape("commitment loss", latents.dim(), quantized.dim()));
    }
    if latents.is_empty() {
        return Ok(T::zero());
    }
    let sum: T = Zip::from(&latents)
        .and(&quantized)
        .fold(T::zero(), |acc, &a, &b| acc + (a - b) * (a - b));
    Ok(sum / T::from_usize_lossy(latents.len()))
}

/// Gradient of [`commitment_loss`] w.r.t. the latents.
pub fn commitment_grad<T: Scalar>(latents: ArrayView2<T>, quantized: ArrayView2<T>) -> Array2<T> {
    let scale = T::lit(2.0) / T::from_usize_lossy(latents.len().max(1));
    (&latents - &quantized) * scale
}

const CODEBOOK_MAGIC: &[u8; 4] = b"CPXQ";
const CODEBOOK_VERSION: u8 = 1;

/// Writes a stack in the codebook checkpoint layout:
///
/// | offset | size | field                               |
/// |--------|------|-------------------------------------|
/// | 0      | 4    | magic `CPXQ`                        |
/// | 4      | 1    | version (1)                         |
/// | 5      | 1    | branch tag (0 real, 1 imaginary)    |
/// | 6      | 2    | reserved, zero                      |
/// | 8      | 4    | K, u32 LE                           |
/// | 12     | 4    | D, u32 LE                           |
/// | 16     | 4    | stage count, u32 LE                 |
/// | 20     | ...  | `stages x K x D` f32 LE, row-major  |
pub fn write_codebooks<T: Scalar>(mut w: impl Write, stack: &RvqStack<T>, branch: Branch) -> std::io::Result<()> {
    let k = stack.stages.first().map_or(0, |s| s.size());
    w.write_all(CODEBOOK_MAGIC)?;
    w.write_all(&[CODEBOOK_VERSION, branch as u8, 0, 0])?;
    for v in [k, stack.dim(), stack.n_stages()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for stage in &stack.stages {
        for &v in stage.entries.iter() {
            w.write_all(&v.as_f32().to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a stack written by [`write_codebooks`]; EMA statistics restart from the entries.
pub fn read_codebooks<T: Scalar>(mut r: impl Read, decay: f64, eps: f64) -> Result<(RvqStack<T>, Branch)> {
    let mut head = [0u8; 20];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("codebook header truncated".into()))?;
    if &head[0..4] != CODEBOOK_MAGIC {
        return Err(Error::Format("bad codebook magic".into()));
    }
    if head[4] != CODEBOOK_VERSION {
        return Err(Error::VersionMismatch {
            found: head[4],
            expected: CODEBOOK_VERSION,
        });
    }
    let branch = Branch::from_tag(head[5])?;
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (k, d, n) = (word(8), word(12), word(16));
    let mut stages = Vec::with_capacity(n);
    let mut buf = vec![0u8; k * d * 4];
    for _ in 0..n {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format("codebook entries truncated".into()))?;
        let values: Vec<T> = buf
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        let entries = Array2::from_shape_vec((k, d), values).expect("k x d");
        stages.push(Codebook::from_entries(entries, decay, eps));
    }
    Ok((RvqStack::from_stages(stages)?, branch))
}
