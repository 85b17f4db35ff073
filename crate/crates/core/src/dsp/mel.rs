//! Log-mel analysis used by the multi-resolution mel loss.

use ndarray::{Array2, Zip};
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use super::stft::{StftConfig, StftPlan, Window};
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub sample_rate: u32,
    /// Clamp applied to mel magnitudes before `log10`.
    pub log_floor: f64,
}

impl MelConfig {
    pub fn new(hop: usize, fft_size: usize, sample_rate: u32) -> Self {
        Self {
            n_mels: 80,
            hop,
            fft_size,
            fmin: 0.0,
            fmax: sample_rate as f64 / 2.0,
            sample_rate,
            log_floor: 1e-5,
        }
    }

    /// The three loss resolutions: hops 50/120/240 with FFT sizes 512/1024/2048.
    pub fn multi_resolution(sample_rate: u32) -> Vec<Self> {
        [(50, 512), (120, 1024), (240, 2048)]
            .into_iter()
            .map(|(hop, fft)| Self::new(hop, fft, sample_rate))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::InvalidConfig("n_mels must be positive".into()));
        }
        if self.hop >= self.fft_size {
            return Err(Error::InvalidConfig(format!(
                "mel hop {} must be smaller than fft size {}",
                self.hop, self.fft_size
            )));
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin && self.log_floor > 0.0) {
            return Err(Error::InvalidConfig(format!("bad mel band edges {self:?}")));
        }
        Ok(())
    }

    fn stft_config(&self) -> StftConfig {
        StftConfig {
            hop: self.hop,
            fft_size: self.fft_size,
            window: Window::Hann,
            sample_rate: self.sample_rate,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peaks on the HTK mel scale, `n_mels x n_bins`.
/// Adjacent triangles sum to at most one at every frequency.
pub fn mel_filterbank<T: Scalar>(cfg: &MelConfig) -> Array2<T> {
    let n_bins = cfg.fft_size / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    Array2::from_shape_fn((cfg.n_mels, n_bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let rise = (f - left) / (center - left);
        let fall = (right - f) / (right - center);
        T::lit(rise.min(fall).max(0.0))
    })
}

/// Intermediate values kept for back-propagation through [`MelAnalyzer::log_mel`].
pub struct MelCache<T> {
    spec: Array2<Complex<T>>,
    magnitude: Array2<T>,
    mel: Array2<T>,
    len: usize,
}

pub struct MelAnalyzer<T: Scalar> {
    config: MelConfig,
    plan: StftPlan<T>,
    filters: Array2<T>,
}

impl<T: Scalar> MelAnalyzer<T> {
    pub fn new(config: MelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            plan: StftPlan::new(config.stft_config())?,
            filters: mel_filterbank(&config),
            config,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    pub fn filters(&self) -> &Array2<T> {
        &self.filters
    }

    /// Mel magnitudes, `frames x n_mels`.
    pub fn mel(&self, samples: &[T]) -> Result<Array2<T>> {
        Ok(self.mel_cached(samples)?.mel)
    }

    fn mel_cached(&self, samples: &[T]) -> Result<MelCache<T>> {
        if samples.len() < self.config.fft_size {
            return Err(Error::TooShort {
                len: samples.len(),
                frame: self.config.fft_size,
            });
        }
        let spec = self.plan.forward(samples)?;
        let magnitude = spec.mapv(|c| c.norm());
        let mel = magnitude.dot(&self.filters.t());
        Ok(MelCache {
            spec,
            magnitude,
            mel,
            len: samples.len(),
        })
    }

    /// `log10(max(mel, floor))`, `frames x n_mels`.
    pub fn log_mel(&self, samples: &[T]) -> Result<(Array2<T>, MelCache<T>)> {
        let cache = self.mel_cached(samples)?;
        let floor = T::lit(self.config.log_floor);
        Ok((cache.mel.mapv(|v| v.max(floor).log10()), cache))
    }

    /// Back-propagates a gradient on the log-mel matrix to the input samples.
    pub fn log_mel_backward(&self, cache: &MelCache<T>, grad: &Array2<T>) -> Result<Vec<T>> {
        let floor = T::lit(self.config.log_floor);
        let ln10 = T::LN_10();
        let mut g_mel = grad.clone();
        Zip::from(&mut g_mel).and(&cache.mel).for_each(|g, &m| {
            *g = if m > floor { *g / (m * ln10) } else { T::zero() };
        });
        let g_mag = g_mel.dot(&self.filters);
        let mut g_spec = cache.spec.clone();
        Zip::from(&mut g_spec)
            .and(&cache.magnitude)
            .and(&g_mag)
            .for_each(|s, &mag, &g| {
                *s = if mag > T::zero() {
                    *s * (g / mag)
                } else {
                    Complex::new(T::zero(), T::zero())
                };
            });
        self.plan.forward_adjoint(&g_spec, cache.len)
    }
}

/// Log-mel spectrogram of a waveform, `frames x n_mels`.
pub fn mel_spectrogram<T: Scalar>(samples: &[T], cfg: &MelConfig) -> Result<Array2<T>> {
    Ok(MelAnalyzer::new(*cfg)?.log_mel(samples)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn one_second_at_hop_50_gives_960_frames() {
        let cfg = MelConfig::new(50, 512, 48_000);
        let m = mel_spectrogram(&vec![0.01f32; 48_000], &cfg).unwrap();
        assert_eq!(m.dim(), (960, 80));
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let cfg = MelConfig::new(120, 1024, 48_000);
        let m = mel_spectrogram(&vec![0.0f64; 4800], &cfg).unwrap();
        assert!(m.iter().all(|&v| (v - (-5.0)).abs() < 1e-12));
    }

    #[test]
    fn short_input_is_rejected() {
        let cfg = MelConfig::new(240, 2048, 48_000);
        assert!(matches!(
            mel_spectrogram(&vec![0.0f32; 2000], &cfg),
            Err(Error::TooShort { .. })
        ));
        assert!(MelConfig::new(512, 512, 48_000).validate().is_err());
    }

    #[test]
    fn filterbank_is_a_partition_bounded_by_one() {
        for cfg in MelConfig::multi_resolution(48_000) {
            let fb = mel_filterbank::<f64>(&cfg);
            for col in fb.columns() {
                assert!(col.sum() <= 1.0 + 1e-12);
                assert!(col.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn mel_energy_bounded_by_spectral_energy_on_white_noise() {
        let cfg = MelConfig::new(120, 1024, 48_000);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..24_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let an = MelAnalyzer::<f64>::new(cfg).unwrap();
        let spec = an.plan.forward(&x).unwrap();
        let power = spec.mapv(|c| c.norm_sqr());
        let mel_power = power.dot(&an.filters.t());
        assert!(mel_power.sum() <= power.sum());
        let mag = spec.mapv(|c| c.norm());
        assert!(an.mel(&x).unwrap().sum() <= mag.sum());
    }

    #[test]
    fn log_mel_gradient_matches_finite_differences() {
        let cfg = MelConfig {
            n_mels: 6,
            ..MelConfig::new(16, 64, 8000)
        };
        let an = MelAnalyzer::<f64>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..150).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (lm, cache) = an.log_mel(&x).unwrap();
        let weights = Array2::from_shape_fn(lm.dim(), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let g = an.log_mel_backward(&cache, &weights).unwrap();
        let objective = |x: &[f64]| (an.log_mel(x).unwrap().0 * &weights).sum();
        for i in [0, 17, 75, 149] {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }
}
