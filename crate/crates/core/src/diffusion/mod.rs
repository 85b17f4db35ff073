//! Score-based post-filter: the OUVE SDE, score matching, the
//! predictor-corrector sampler and tiled enhancement of decoded spectra.

mod sde;
mod unet;

pub use sde::{drift, perturbation_kernel, sample_xt, true_score, SdeConfig};
pub use unet::{UNet, UNetCache, UNetConfig};

use std::path::Path;

use ndarray::{s, Array2, Array3, Zip};
use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::dsp::compand::{compand_matrix, decompand_matrix};
use crate::dsp::{ComplexSpectrogram, CompandingParams};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::Scalar;

pub const SPF_MAGIC: [u8; 4] = *b"CPXS";

type Spec<T> = Array2<Complex<T>>;

/// Anything that estimates the score of `x_t` given the conditioner.
pub trait ScoreModel<T: Scalar> {
    fn score(&self, x_t: &Spec<T>, x_hat: &Spec<T>, t: f64) -> Result<Spec<T>>;
}

impl<T: Scalar, F> ScoreModel<T> for F
where
    F: Fn(&Spec<T>, &Spec<T>, f64) -> Result<Spec<T>>,
{
    fn score(&self, x_t: &Spec<T>, x_hat: &Spec<T>, t: f64) -> Result<Spec<T>> {
        self(x_t, x_hat, t)
    }
}

/// The exact score for a single known clean spectrum.
pub struct AnalyticScore<'a, T> {
    pub x0: &'a Spec<T>,
    pub sde: SdeConfig,
}

impl<T: Scalar> ScoreModel<T> for AnalyticScore<'_, T> {
    fn score(&self, x_t: &Spec<T>, x_hat: &Spec<T>, t: f64) -> Result<Spec<T>> {
        let (mean, sigma) = perturbation_kernel(self.x0, x_hat, t, &self.sde)?;
        true_score(x_t, &mean, sigma)
    }
}

fn normal<T: Scalar>(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Spec<T> {
    Array2::from_shape_simple_fn(shape, || {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex::new(T::lit(re), T::lit(im))
    })
}

fn norm<T: Scalar>(x: &Spec<T>) -> f64 {
    x.iter().map(|v| v.norm_sqr().as_f64()).sum::<f64>().sqrt()
}

/// Mean over `draws` of `|s(x_t, x_hat, t) + z / sigma(t)|^2` with
/// `x_t = mean + sigma z`.
pub fn score_matching_loss<T: Scalar>(
    model: &impl ScoreModel<T>,
    x0: &Spec<T>,
    x_hat: &Spec<T>,
    draws: &[(f64, Spec<T>)],
    cfg: &SdeConfig,
) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::EmptyInput("score matching draws"));
    }
    let mut total = 0.0;
    for (t, z) in draws {
        let x_t = sample_xt(x0, x_hat, *t, z, cfg)?;
        let sigma = cfg.sigma(*t)?;
        if !(sigma > 0.0) {
            return Err(Error::ZeroSigma);
        }
        let s = model.score(&x_t, x_hat, *t)?;
        if s.dim() != z.dim() {
            return Err(Error::shape("score output", z.dim(), s.dim()));
        }
        if s.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFinite("score model output"));
        }
        let inv = T::lit(1.0 / sigma);
        total += Zip::from(&s).and(z).fold(0.0, |acc, &a, &b| acc + (a + b * inv).norm_sqr().as_f64());
    }
    Ok(total / draws.len() as f64)
}

/// `n` training draws: `t` uniform in `[t_eps, T]` and standard normal noise.
pub fn draw_times_and_noise<T: Scalar>(n: usize, shape: (usize, usize), cfg: &SdeConfig, rng: &mut ChaCha8Rng) -> Vec<(f64, Spec<T>)> {
    use rand::Rng;
    (0..n)
        .map(|_| {
            let t = rng.random_range(cfg.t_eps..=cfg.t_max);
            (t, normal(shape, rng))
        })
        .collect()
}

/// Reverse-diffusion predictor and annealed Langevin corrector from `T` down
/// to `t_eps`, starting at `x_hat + sigma(T) z`. Returns the final noise-free
/// mean. Noise is drawn in the order: start state, then per step the
/// predictor noise followed by the corrector noise.
pub fn pc_sample<T: Scalar>(model: &impl ScoreModel<T>, x_hat: &Spec<T>, cfg: &SdeConfig, seed: u64) -> Result<Spec<T>> {
    pc_sample_with(model, x_hat, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn pc_sample_with<T: Scalar>(model: &impl ScoreModel<T>, x_hat: &Spec<T>, cfg: &SdeConfig, rng: &mut ChaCha8Rng) -> Result<Spec<T>> {
    cfg.validate()?;
    let shape = x_hat.dim();
    let sigma_t = T::lit(cfg.sigma(cfg.t_max)?);
    let mut x = x_hat.clone();
    x.zip_mut_with(&normal::<T>(shape, rng), |v, z| *v = *v + z * sigma_t);
    let dt = (cfg.t_max - cfg.t_eps) / cfg.n_steps as f64;
    let mut x_mean = x.clone();
    for i in 0..cfg.n_steps {
        let t = cfg.t_max - i as f64 * dt;
        // predictor: one Euler-Maruyama step of the reverse SDE
        let g = cfg.diffusion_coeff(t)?;
        let f = drift(&x, x_hat, cfg)?;
        let s = model.score(&x, x_hat, t)?;
        let (dt_, g2) = (T::lit(dt), T::lit(g * g * dt));
        x_mean = Zip::from(&x).and(&f).and(&s).map_collect(|&v, &f, &s| v - f * dt_ + s * g2);
        let noise_scale = T::lit(g * dt.sqrt());
        let z = normal::<T>(shape, rng);
        x = Zip::from(&x_mean).and(&z).map_collect(|&m, &z| m + z * noise_scale);

        // corrector: one Langevin step at the new time
        let t_next = (t - dt).max(cfg.t_eps);
        let s = model.score(&x, x_hat, t_next)?;
        let z = normal::<T>(shape, rng);
        let s_norm = norm(&s);
        if s_norm > 0.0 {
            let eps = 2.0 * (cfg.snr * norm(&z) / s_norm).powi(2);
            let (e, r) = (T::lit(eps), T::lit((2.0 * eps).sqrt()));
            x_mean = Zip::from(&x).and(&s).map_collect(|&v, &s| v + s * e);
            x = Zip::from(&x_mean).and(&z).map_collect(|&m, &z| m + z * r);
        } else {
            x_mean = x.clone();
        }
    }
    if x_mean.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite("sampler output"));
    }
    Ok(x_mean)
}

/// Splits `frames` into consecutive tiles of `tile` frames; the last one is
/// zero-padded.
pub fn split_tiles<T: Scalar>(x: &Spec<T>, tile: usize) -> Vec<Spec<T>> {
    let (frames, bins) = x.dim();
    (0..frames.div_ceil(tile))
        .map(|k| {
            let mut out = Array2::from_elem((tile, bins), Complex::new(T::zero(), T::zero()));
            let (a, b) = (k * tile, ((k + 1) * tile).min(frames));
            out.slice_mut(s![..b - a, ..]).assign(&x.slice(s![a..b, ..]));
            out
        })
        .collect()
}

/// Concatenates tiles and crops to `frames`.
pub fn stitch_tiles<T: Scalar>(tiles: &[Spec<T>], frames: usize) -> Result<Spec<T>> {
    let views: Vec<_> = tiles.iter().map(|t| t.view()).collect();
    let all = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Format(e.to_string()))?;
    if all.nrows() < frames {
        return Err(Error::shape("stitched frames", frames, all.nrows()));
    }
    Ok(all.slice(s![..frames, ..]).to_owned())
}

/// Compands, runs `refine(tile, index)` on every tile, stitches and
/// decompands.
pub fn enhance_with<T: Scalar>(
    decoded: &ComplexSpectrogram<T>,
    companding: &CompandingParams,
    tile: usize,
    mut refine: impl FnMut(&Spec<T>, usize) -> Result<Spec<T>>,
) -> Result<ComplexSpectrogram<T>> {
    companding.validate()?;
    if tile == 0 {
        return Err(Error::InvalidConfig("tile length must be positive".into()));
    }
    if !decoded.is_finite() {
        return Err(Error::NonFinite("decoded spectrogram"));
    }
    let c = compand_matrix(&decoded.data, companding);
    let tiles = split_tiles(&c, tile)
        .iter()
        .enumerate()
        .map(|(k, x)| refine(x, k))
        .collect::<Result<Vec<_>>>()?;
    let out = stitch_tiles(&tiles, decoded.n_frames())?;
    Ok(ComplexSpectrogram {
        data: decompand_matrix(&out, companding),
        config: decoded.config,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpfConfig {
    pub sde: SdeConfig,
    pub unet: UNetConfig,
    pub companding: CompandingParams,
    /// Frames per enhancement tile.
    pub tile_frames: usize,
    /// Per-component variance of `x0 - x_hat` assumed by the score's
    /// Gaussian skip path. Training estimates it when unset; unset at
    /// inference means zero.
    pub prior_variance: Option<f64>,
}

impl Default for SpfConfig {
    fn default() -> Self {
        Self {
            sde: SdeConfig::default(),
            unet: UNetConfig::desk(),
            companding: CompandingParams::default(),
            tile_frames: 256,
            prior_variance: None,
        }
    }
}

impl SpfConfig {
    pub fn validate(&self) -> Result<()> {
        self.sde.validate()?;
        self.unet.validate()?;
        self.companding.validate()?;
        if let Some(v) = self.prior_variance {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("prior variance {v} must be finite and non-negative")));
            }
        }
        if self.tile_frames == 0 || self.tile_frames % self.unet.size_multiple() != 0 {
            return Err(Error::InvalidConfig(format!(
                "tile of {} frames is not a positive multiple of {}",
                self.tile_frames,
                self.unet.size_multiple()
            )));
        }
        Ok(())
    }
}

/// The post-filter. It estimates the residual `R ~ x0 - x_hat` and returns
/// the score of the Gaussian kernel centred on the implied mean,
/// `-(x_t - x_hat - w R) / sigma^2` with `w = e^{-gamma t}`.
///
/// `R = c (x_t - x_hat) + U` where `c = w v / (w^2 v + sigma^2)` is the
/// posterior-mean gain for a residual of per-component variance `v`
/// (`prior_variance`) and `U` is the U-Net output from `x_t - x_hat` and
/// `x_hat`. With `U = 0` the score is exactly that of the Gaussian prior;
/// the output layer starts at zero, so the network learns a correction to it.
/// With `v = 0` an untrained filter trusts the codec.
#[derive(Debug, Clone)]
pub struct Spf<T> {
    pub config: SpfConfig,
    pub net: UNet<T>,
}

fn stack<T: Scalar>(x_t: &Spec<T>, x_hat: &Spec<T>) -> Array3<T> {
    let (frames, bins) = x_t.dim();
    Array3::from_shape_fn((unet::IN_CHANNELS, frames, bins), |(c, i, j)| match c {
        0 => x_t[[i, j]].re - x_hat[[i, j]].re,
        1 => x_t[[i, j]].im - x_hat[[i, j]].im,
        2 => x_hat[[i, j]].re,
        _ => x_hat[[i, j]].im,
    })
}

/// Score implied by the network's residual correction `u`.
fn residual_score<T: Scalar>(x_t: &Spec<T>, x_hat: &Spec<T>, u: &Spec<T>, t: f64, cfg: &SdeConfig, prior_variance: f64) -> Result<Spec<T>> {
    let sigma = cfg.sigma(t)?;
    if !(sigma > 0.0) {
        return Err(Error::ZeroSigma);
    }
    let w = cfg.mean_weight(t);
    let gain = w * prior_variance / (w * w * prior_variance + sigma * sigma);
    let (keep, w, inv) = (T::lit(1.0 - w * gain), T::lit(w), T::lit(-1.0 / (sigma * sigma)));
    Ok(Zip::from(x_t).and(x_hat).and(u).map_collect(|&x, &c, &r| ((x - c) * keep - r * w) * inv))
}

fn unstack<T: Scalar>(y: &Array3<T>) -> Spec<T> {
    let (_, frames, bins) = y.dim();
    Array2::from_shape_fn((frames, bins), |(i, j)| Complex::new(y[[0, i, j]], y[[1, i, j]]))
}

impl<T: Scalar> Spf<T> {
    pub fn new(config: SpfConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let net = UNet::new(config.unet.clone(), seed)?;
        Ok(Self { config, net })
    }

    pub fn prior_variance(&self) -> f64 {
        self.config.prior_variance.unwrap_or(0.0)
    }

    /// One score-matching gradient accumulation over a batch of
    /// `(x0, x_hat, t, z)`; returns the mean loss. Gradients are not zeroed.
    pub fn accumulate(&mut self, batch: &[(Spec<T>, Spec<T>, f64, Spec<T>)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("score matching batch"));
        }
        let n = batch.len() as f64;
        let mut total = 0.0;
        for (x0, x_hat, t, z) in batch {
            let x_t = sample_xt(x0, x_hat, *t, z, &self.config.sde)?;
            let sigma = self.config.sde.sigma(*t)?;
            if !(sigma > 0.0) {
                return Err(Error::ZeroSigma);
            }
            let (out, cache) = self.net.forward(&stack(&x_t, x_hat), *t)?;
            let score = residual_score(&x_t, x_hat, &unstack(&out), *t, &self.config.sde, self.prior_variance())?;
            // r = s + z / sigma; ds/dU = e^{-gamma t} / sigma^2
            let inv = T::lit(1.0 / sigma);
            let r = Zip::from(&score).and(z).map_collect(|&a, &b| a + b * inv);
            let loss: f64 = r.iter().map(|v| v.norm_sqr().as_f64()).sum();
            if !loss.is_finite() {
                return Err(Error::NonFinite("score matching loss"));
            }
            let k = T::lit(2.0 * self.config.sde.mean_weight(*t) / (sigma * sigma * n));
            let grad = Array3::from_shape_fn(out.dim(), |(c, i, j)| if c == 0 { r[[i, j]].re * k } else { r[[i, j]].im * k });
            total += loss;
            self.net.backward(cache, &grad);
        }
        Ok(total / n)
    }

    /// Tiled enhancement of a decoded linear-magnitude spectrogram. Tile `k`
    /// samples with stream `k` of `seed`, so the result does not depend on
    /// the order tiles are processed in.
    pub fn enhance(&self, decoded: &ComplexSpectrogram<T>, seed: u64) -> Result<ComplexSpectrogram<T>> {
        enhance_with(decoded, &self.config.companding, self.config.tile_frames, |tile, k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            pc_sample_with(self, tile, &self.config.sde, &mut rng)
        })
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new(SPF_MAGIC, &self.config)?;
        a.push_params(self.net.params());
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let config: SpfConfig = a.config()?;
        let mut spf = Self::new(config, 0)?;
        a.load_params(spf.net.params_mut())?;
        Ok(spf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path, SPF_MAGIC)?)
    }
}

impl<T: Scalar> ScoreModel<T> for Spf<T> {
    fn score(&self, x_t: &Spec<T>, x_hat: &Spec<T>, t: f64) -> Result<Spec<T>> {
        if x_t.dim() != x_hat.dim() {
            return Err(Error::shape("score input", x_hat.dim(), x_t.dim()));
        }
        let (out, _) = self.net.forward(&stack(x_t, x_hat), t)?;
        let s = residual_score(x_t, x_hat, &unstack(&out), t, &self.config.sde, self.prior_variance())?;
        if s.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFinite("score model output"));
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;

    fn zero_score(x: &Spec<f64>, _: &Spec<f64>, _: f64) -> Result<Spec<f64>> {
        Ok(x.mapv(|_| Complex::new(0.0, 0.0)))
    }

    fn randc(shape: (usize, usize), seed: u64) -> Spec<f64> {
        normal(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn perfect_model_has_zero_loss_and_zero_model_matches_expectation() {
        let cfg = SdeConfig::default();
        let (x0, c) = (randc((8, 8), 0), randc((8, 8), 1));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = draw_times_and_noise::<f64>(400, (8, 8), &cfg, &mut rng);
        let oracle = AnalyticScore { x0: &x0, sde: cfg };
        let l = score_matching_loss(&oracle, &x0, &c, &draws, &cfg).unwrap();
        assert!(l < 1e-12 * draws.len() as f64, "{l}");
        // E|z|^2 / sigma^2 = elements / sigma^2
        let zero = score_matching_loss(&zero_score, &x0, &c, &draws, &cfg).unwrap();
        let expected: f64 = draws.iter().map(|(t, _)| 128.0 / cfg.sigma(*t).unwrap().powi(2)).sum::<f64>() / draws.len() as f64;
        let spread = {
            let v: Vec<f64> = draws.iter().map(|(t, z)| norm(z).powi(2) / cfg.sigma(*t).unwrap().powi(2)).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        assert!((zero - expected).abs() < 3.0 * spread / (draws.len() as f64).sqrt() + 0.05 * expected, "{zero} vs {expected}");
        let bad = |x: &Spec<f64>, _: &Spec<f64>, _: f64| -> Result<Spec<f64>> { Ok(x.mapv(|_| Complex::new(f64::NAN, 0.0))) };
        assert!(matches!(score_matching_loss(&bad, &x0, &c, &draws, &cfg), Err(Error::NonFinite(_))));
    }

    #[test]
    fn single_step_zero_score_by_hand() {
        let cfg = SdeConfig {
            n_steps: 1,
            ..Default::default()
        };
        let c = Array2::from_elem((1, 1), Complex::new(0.4, -0.3));
        let out = pc_sample(&zero_score, &c, &cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z0: Spec<f64> = normal((1, 1), &mut rng);
        let z1: Spec<f64> = normal((1, 1), &mut rng);
        let x_t = c[[0, 0]] + z0[[0, 0]] * cfg.sigma(1.0).unwrap();
        let dt = 1.0 - cfg.t_eps;
        let mean = x_t - (c[[0, 0]] - x_t) * 1.5 * dt;
        let g = cfg.diffusion_coeff(1.0).unwrap();
        // the corrector sees a zero score and leaves the noisy state as is
        let expected = mean + z1[[0, 0]] * g * dt.sqrt();
        assert!((out[[0, 0]] - expected).norm() < 1e-12, "{} vs {expected}", out[[0, 0]]);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let cfg = SdeConfig::default();
        let (x0, c) = (randc((4, 4), 3), randc((4, 4), 4));
        let oracle = AnalyticScore { x0: &x0, sde: cfg };
        let a = pc_sample(&oracle, &c, &cfg, 5).unwrap();
        assert_eq!(a, pc_sample(&oracle, &c, &cfg, 5).unwrap());
        assert_ne!(a, pc_sample(&oracle, &c, &cfg, 6).unwrap());
    }

    #[test]
    fn analytic_score_pulls_towards_clean() {
        let cfg = SdeConfig::default();
        let x0 = randc((16, 16), 7);
        let c = x0.mapv(|v| v * 0.5) + randc((16, 16), 8).mapv(|v| v * 0.5);
        let oracle = AnalyticScore { x0: &x0, sde: cfg };
        let base = norm(&(&c - &x0));
        let mut acc = 0.0;
        for seed in 0..10 {
            acc += norm(&(&pc_sample(&oracle, &c, &cfg, seed).unwrap() - &x0)) / base;
        }
        assert!(acc / 10.0 < 0.5, "{}", acc / 10.0);
    }

    #[test]
    fn tiles_preserve_frame_count_and_identity_refinement_is_exact() {
        let cfg = StftConfig::default();
        for frames in [100, 256, 300] {
            let data = randc((frames, cfg.n_bins()), frames as u64).mapv(|v| v * 3.0);
            let spec = ComplexSpectrogram { data, config: cfg };
            let tiles = split_tiles(&spec.data, 256);
            assert_eq!(tiles.len(), frames.div_ceil(256));
            assert!(tiles.iter().all(|t| t.dim() == (256, 256)));
            assert_eq!(stitch_tiles(&tiles, frames).unwrap(), spec.data);
            let out = enhance_with(&spec, &CompandingParams::default(), 256, |t, _| Ok(t.clone())).unwrap();
            assert_eq!(out.n_frames(), frames);
            for (a, b) in out.data.iter().zip(&spec.data) {
                assert!((a - b).norm() <= 1e-10 * b.norm().max(1.0));
            }
        }
    }

    #[test]
    fn tile_order_does_not_matter() {
        let mut spf = Spf::<f64>::new(
            SpfConfig {
                sde: SdeConfig { n_steps: 2, ..Default::default() },
                unet: UNetConfig { base_channels: 2, channel_mults: vec![1, 2], fourier_features: 2, fourier_scale: 1.0 },
                tile_frames: 4,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        for p in spf.net.params_mut() {
            p.value.mapv_inplace(|v| v + 0.01);
        }
        let cfg = StftConfig::default();
        let spec = ComplexSpectrogram { data: randc((10, cfg.n_bins()), 9), config: cfg };
        let whole = spf.enhance(&spec, 3).unwrap();
        // redo tile 2 alone with its own stream and compare the overlap
        let c = compand_matrix(&spec.data, &spf.config.companding);
        let tiles = split_tiles(&c, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(2);
        let alone = decompand_matrix(&pc_sample_with(&spf, &tiles[2], &spf.config.sde, &mut rng).unwrap(), &spf.config.companding);
        assert_eq!(whole.data.slice(s![8..10, ..]), alone.slice(s![..2, ..]));
    }

    #[test]
    fn training_reduces_the_loss_on_a_fixed_pair() {
        let mut spf = Spf::<f64>::new(
            SpfConfig {
                unet: UNetConfig { base_channels: 4, channel_mults: vec![1, 2], fourier_features: 4, fourier_scale: 4.0 },
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let x0 = randc((8, 8), 10).mapv(|v| v * 0.3);
        let c = x0.mapv(|v| v * 0.8);
        let cfg = spf.config.sde;
        let eval = draw_times_and_noise::<f64>(32, (8, 8), &cfg, &mut ChaCha8Rng::seed_from_u64(12));
        let before = score_matching_loss(&spf, &x0, &c, &eval, &cfg).unwrap();
        let mut adam = crate::nn::Adam::new(crate::nn::AdamConfig { lr: 2e-3, ..Default::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..150 {
            let batch: Vec<_> = draw_times_and_noise::<f64>(4, (8, 8), &cfg, &mut rng)
                .into_iter()
                .map(|(t, z)| (x0.clone(), c.clone(), t, z))
                .collect();
            spf.net.zero_grad();
            spf.accumulate(&batch).unwrap();
            adam.step(spf.net.params_mut());
        }
        let after = score_matching_loss(&spf, &x0, &c, &eval, &cfg).unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
    }

    #[test]
    fn untrained_filter_gives_the_gaussian_prior_score() {
        let v = 0.3;
        let spf = Spf::<f64>::new(SpfConfig { prior_variance: Some(v), tile_frames: 8, ..Default::default() }, 2).unwrap();
        let cfg = spf.config.sde;
        let (x_t, c) = (randc((8, 8), 20), randc((8, 8), 21));
        for t in [cfg.t_eps, 0.4, 1.0] {
            let (w, sigma) = (cfg.mean_weight(t), cfg.sigma(t).unwrap());
            // x_t - x_hat ~ N(0, w^2 v + sigma^2) per component
            let want = (&x_t - &c).mapv(|d| -d / (w * w * v + sigma * sigma));
            let got = spf.score(&x_t, &c, t).unwrap();
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).norm() <= 1e-12 * b.norm().max(1.0), "t={t}: {a} vs {b}");
            }
        }
        let zero = Spf::<f64>::new(SpfConfig { tile_frames: 8, ..Default::default() }, 2).unwrap();
        assert!(zero.score(&x_t, &c, 0.5).unwrap().iter().zip(&(&x_t - &c)).all(|(s, d)| (s + d / cfg.sigma(0.5).unwrap().powi(2)).norm() < 1e-9));
        assert!(Spf::<f64>::new(SpfConfig { prior_variance: Some(-1.0), ..Default::default() }, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spf = Spf::<f32>::new(SpfConfig { prior_variance: Some(0.25), ..Default::default() }, 4).unwrap();
        let path = dir.path().join("spf.cpxs");
        spf.save(&path).unwrap();
        let back = Spf::<f32>::load(&path).unwrap();
        assert_eq!(back.config, spf.config);
        for (a, b) in back.net.params().iter().zip(spf.net.params()) {
            assert_eq!(a.value, b.value);
        }
    }
}
