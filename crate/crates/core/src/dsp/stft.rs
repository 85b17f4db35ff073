//! Centered short-time Fourier transform with weighted overlap-add inversion.
//!
//! Frames are centered: frame `t` covers samples `t*hop - fft/2 .. t*hop + fft/2`
//! of the reflect-padded signal, giving `ceil(len / hop)` frames. Any even FFT
//! size is accepted (the default 510 yields exactly 256 bins).
//!
//! Besides the forward and inverse transforms this module exposes their exact
//! adjoints, which the training code uses to back-propagate losses computed on
//! waveforms into spectral-domain gradients.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// Analysis window shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// Periodic Hann window.
    #[default]
    Hann,
}

impl Window {
    pub fn coefficients<T: Scalar>(self, n: usize) -> Vec<T> {
        match self {
            Window::Hann => (0..n)
                .map(|i| {
                    let phase = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                    T::lit(0.5 - 0.5 * phase.cos())
                })
                .collect(),
        }
    }
}

/// STFT geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub hop: usize,
    pub fft_size: usize,
    #[serde(default)]
    pub window: Window,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            hop: 320,
            fft_size: 510,
            window: Window::Hann,
            sample_rate: 48_000,
        }
    }
}

impl StftConfig {
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames per second.
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Number of centered frames for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    /// Number of leading samples up to and including the last frame centre.
    /// Past it only the tails of the final windows reach, and the inverse
    /// fades those samples instead of reconstructing them exactly.
    pub fn covered_len(&self, len: usize) -> usize {
        let frames = self.n_frames(len);
        if frames == 0 {
            return 0;
        }
        len.min((frames - 1) * self.hop + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if self.hop == 0 || self.fft_size == 0 {
            return Err(Error::InvalidConfig("hop and fft size must be positive".into()));
        }
        if self.fft_size % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "fft size {} must be even",
                self.fft_size
            )));
        }
        if self.hop > self.fft_size {
            return Err(Error::InvalidConfig(format!(
                "hop {} exceeds fft size {}",
                self.hop, self.fft_size
            )));
        }
        Ok(())
    }

    /// Checks that the squared window overlap-adds to a strictly positive
    /// envelope at every hop phase, which is what weighted overlap-add needs.
    pub fn check_overlap_add(&self) -> Result<()> {
        let w: Vec<f64> = self.window.coefficients(self.fft_size);
        for phase in 0..self.hop {
            let total: f64 = w.iter().skip(phase).step_by(self.hop).map(|v| v * v).sum();
            if total <= 1e-10 {
                return Err(Error::OverlapAdd(format!(
                    "hop {} with {}-point window leaves phase {phase} uncovered",
                    self.hop, self.fft_size
                )));
            }
        }
        Ok(())
    }
}

/// A mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveSegment<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> WaveSegment<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Complex spectrogram stored as `frames x bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram<T> {
    pub data: Array2<Complex<T>>,
    pub config: StftConfig,
}

impl<T: Scalar> ComplexSpectrogram<T> {
    pub fn zeros(frames: usize, config: StftConfig) -> Self {
        Self {
            data: Array2::from_elem((frames, config.n_bins()), Complex::new(T::zero(), T::zero())),
            config,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn real(&self) -> Array2<T> {
        self.data.mapv(|c| c.re)
    }

    pub fn imag(&self) -> Array2<T> {
        self.data.mapv(|c| c.im)
    }

    /// Reassembles a spectrogram from its real and imaginary parts.
    pub fn from_parts(re: &Array2<T>, im: &Array2<T>, config: StftConfig) -> Result<Self> {
        if re.dim() != im.dim() {
            return Err(Error::shape("spectrogram parts", re.dim(), im.dim()));
        }
        let mut data = Array2::from_elem(re.dim(), Complex::new(T::zero(), T::zero()));
        ndarray::Zip::from(&mut data)
            .and(re)
            .and(im)
            .for_each(|d, &r, &i| *d = Complex::new(r, i));
        Ok(Self { data, config })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

/// Fraction of the peak overlap-add envelope below which samples are faded.
const TAIL_FLOOR: f64 = 0.1;

/// Precomputed FFT plans and window for one STFT geometry.
pub struct StftPlan<T: Scalar> {
    config: StftConfig,
    window: Vec<T>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Scalar> std::fmt::Debug for StftPlan<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("config", &self.config).finish()
    }
}

impl<T: Scalar> StftPlan<T> {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: config.window.coefficients(config.fft_size),
            forward: planner.plan_fft_forward(config.fft_size),
            inverse: planner.plan_fft_inverse(config.fft_size),
            config,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    fn pad(&self) -> usize {
        self.config.fft_size / 2
    }

    /// Maps a position of the reflect-padded signal onto the source signal.
    fn source_index(&self, padded: usize, len: usize) -> usize {
        if len == 1 {
            return 0;
        }
        let period = 2 * (len - 1) as isize;
        let mut i = padded as isize - self.pad() as isize;
        i = i.rem_euclid(period);
        if i >= len as isize {
            i = period - i;
        }
        i as usize
    }

    /// Forward transform of a raw sample slice into a `frames x bins` matrix.
    pub fn forward(&self, samples: &[T]) -> Result<Array2<Complex<T>>> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("stft input"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stft input"));
        }
        let n = self.config.fft_size;
        let frames = self.config.n_frames(samples.len());
        let bins = self.config.n_bins();
        let mut out = Array2::from_elem((frames, bins), Complex::new(T::zero(), T::zero()));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for t in 0..frames {
            let start = t * self.config.hop;
            for (m, slot) in buf.iter_mut().enumerate() {
                let x = samples[self.source_index(start + m, samples.len())];
                *slot = Complex::new(x * self.window[m], T::zero());
            }
            self.forward.process(&mut buf);
            for (k, v) in out.row_mut(t).iter_mut().enumerate() {
                *v = buf[k];
            }
        }
        Ok(out)
    }

    /// Squared-window envelope over the padded signal.
    fn envelope(&self, frames: usize) -> Vec<T> {
        let n = self.config.fft_size;
        let mut env = vec![T::zero(); (frames.saturating_sub(1)) * self.config.hop + n];
        for t in 0..frames {
            let start = t * self.config.hop;
            for m in 0..n {
                env[start + m] += self.window[m] * self.window[m];
            }
        }
        env
    }

    /// Per padded position, the value overlap-added samples are divided by,
    /// or `None` where no window reaches. Positions covered only by the faint
    /// tail of a window are divided by a fraction of the peak envelope so
    /// that inconsistent spectra cannot blow up there.
    fn divisors(&self, frames: usize) -> Vec<Option<T>> {
        let env = self.envelope(frames);
        let peak = env.iter().fold(T::zero(), |m, &v| m.max(v));
        let floor = peak * T::lit(TAIL_FLOOR);
        env.into_iter()
            .map(|v| (v > T::lit(1e-11)).then(|| v.max(floor)))
            .collect()
    }

    fn hermitian_frame(&self, row: ndarray::ArrayView1<Complex<T>>, buf: &mut [Complex<T>]) {
        let n = self.config.fft_size;
        let half = n / 2;
        for k in 0..=half {
            let mut v = row[k];
            if k == 0 || k == half {
                v.im = T::zero();
            }
            buf[k] = v;
            if k != 0 && k != half {
                buf[n - k] = v.conj();
            }
        }
    }

    /// Inverse transform producing exactly `target_len` samples.
    pub fn inverse(&self, spec: &Array2<Complex<T>>, target_len: usize) -> Result<Vec<T>> {
        self.check_bins(spec.ncols())?;
        self.config.check_overlap_add()?;
        let n = self.config.fft_size;
        let frames = spec.nrows();
        let pad = self.pad();
        let scale = T::one() / T::from_usize_lossy(n);
        let mut acc = vec![T::zero(); (frames.saturating_sub(1)) * self.config.hop + n];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for t in 0..frames {
            self.hermitian_frame(spec.row(t), &mut buf);
            self.inverse.process(&mut buf);
            let start = t * self.config.hop;
            for m in 0..n {
                acc[start + m] += self.window[m] * buf[m].re * scale;
            }
        }
        let div = self.divisors(frames);
        Ok((0..target_len)
            .map(|i| match div.get(i + pad) {
                Some(Some(d)) => acc[i + pad] / *d,
                _ => T::zero(),
            })
            .collect())
    }

    /// Adjoint of [`StftPlan::forward`]: maps a spectral gradient
    /// (`dL/dRe + i dL/dIm` per bin) back onto the `len` input samples.
    pub fn forward_adjoint(&self, grad: &Array2<Complex<T>>, len: usize) -> Result<Vec<T>> {
        self.check_bins(grad.ncols())?;
        let n = self.config.fft_size;
        let half = n / 2;
        let mut out = vec![T::zero(); len];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for t in 0..grad.nrows() {
            for v in buf.iter_mut() {
                *v = Complex::new(T::zero(), T::zero());
            }
            for k in 0..=half {
                buf[k] = grad[[t, k]];
            }
            self.inverse.process(&mut buf);
            let start = t * self.config.hop;
            for m in 0..n {
                out[self.source_index(start + m, len)] += self.window[m] * buf[m].re;
            }
        }
        Ok(out)
    }

    /// Adjoint of [`StftPlan::inverse`]: maps a waveform gradient onto the
    /// `frames x bins` spectral gradient.
    pub fn inverse_adjoint(&self, grad: &[T], frames: usize) -> Result<Array2<Complex<T>>> {
        let n = self.config.fft_size;
        let half = n / 2;
        let pad = self.pad();
        let div = self.divisors(frames);
        let mut g_pad = vec![T::zero(); div.len()];
        for (i, &g) in grad.iter().enumerate() {
            if let Some(Some(d)) = div.get(i + pad) {
                g_pad[i + pad] = g / *d;
            }
        }
        let scale = T::one() / T::from_usize_lossy(n);
        let two = T::lit(2.0);
        let mut out = Array2::from_elem((frames, half + 1), Complex::new(T::zero(), T::zero()));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for t in 0..frames {
            let start = t * self.config.hop;
            for m in 0..n {
                buf[m] = Complex::new(self.window[m] * g_pad[start + m], T::zero());
            }
            self.forward.process(&mut buf);
            for k in 0..=half {
                let mut v = buf[k] * scale;
                if k == 0 || k == half {
                    v.im = T::zero();
                } else {
                    v = v * two;
                }
                out[[t, k]] = v;
            }
        }
        Ok(out)
    }

    fn check_bins(&self, bins: usize) -> Result<()> {
        if bins != self.config.n_bins() {
            return Err(Error::shape("spectrogram bins", self.config.n_bins(), bins));
        }
        Ok(())
    }
}

/// Centered STFT of a waveform.
pub fn stft<T: Scalar>(wave: &WaveSegment<T>, config: &StftConfig) -> Result<ComplexSpectrogram<T>> {
    let plan = StftPlan::new(*config)?;
    Ok(ComplexSpectrogram {
        data: plan.forward(&wave.samples)?,
        config: *config,
    })
}

/// Weighted overlap-add inverse STFT.
pub fn istft<T: Scalar>(spec: &ComplexSpectrogram<T>, target_len: usize) -> Result<WaveSegment<T>> {
    let plan = StftPlan::new(spec.config)?;
    let samples = plan.inverse(&spec.data, target_len)?;
    Ok(WaveSegment {
        samples,
        sample_rate: spec.config.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn one_second_gives_150_frames_of_256_bins() {
        let wave = WaveSegment::new(vec![0.0f32; 48_000], 48_000).unwrap();
        let spec = stft(&wave, &StftConfig::default()).unwrap();
        assert_eq!(spec.data.dim(), (150, 256));
    }

    #[test]
    fn zero_wave_gives_zero_spectrogram() {
        let wave = WaveSegment::new(vec![0.0f64; 1000], 48_000).unwrap();
        let spec = stft(&wave, &StftConfig::default()).unwrap();
        assert!(spec.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn empty_and_non_finite_inputs_are_rejected() {
        let plan = StftPlan::<f32>::new(StftConfig::default()).unwrap();
        assert!(matches!(plan.forward(&[]), Err(Error::EmptyInput(_))));
        assert!(matches!(plan.forward(&[0.0, f32::NAN]), Err(Error::NonFinite(_))));
        assert!(WaveSegment::new(vec![f32::INFINITY], 48_000).is_err());
    }

    #[test]
    fn hop_larger_than_window_is_rejected() {
        let cfg = StftConfig {
            hop: 600,
            ..StftConfig::default()
        };
        assert!(StftPlan::<f32>::new(cfg).is_err());
        assert!(matches!(cfg.check_overlap_add(), Err(Error::OverlapAdd(_))));
    }

    #[test]
    fn peak_bin_matches_brute_force_dft() {
        let cfg = StftConfig::default();
        let wave: Vec<f64> = (0..4800)
            .map(|n| (2.0 * std::f64::consts::PI * 750.0 * n as f64 / 48_000.0).sin())
            .collect();
        let spec = StftPlan::<f64>::new(cfg).unwrap().forward(&wave).unwrap();
        let t = 7;
        let peak = (0..spec.ncols())
            .max_by(|&a, &b| spec[[t, a]].norm().partial_cmp(&spec[[t, b]].norm()).unwrap())
            .unwrap();
        assert_eq!(peak, 8);

        // brute-force DFT of the same windowed frame
        let n = cfg.fft_size;
        let w: Vec<f64> = Window::Hann.coefficients(n);
        let start = t * cfg.hop - n / 2;
        for k in [0, 3, 8, 100, 255] {
            let mut acc = Complex::new(0.0, 0.0);
            for m in 0..n {
                let ang = -2.0 * std::f64::consts::PI * (k * m) as f64 / n as f64;
                acc += Complex::from_polar(w[m] * wave[start + m], ang);
            }
            assert!((acc - spec[[t, k]]).norm() < 1e-9 * (1.0 + acc.norm()));
        }
    }

    #[test]
    fn round_trip_interior_snr_exceeds_60_db() {
        let cfg = StftConfig::default();
        let plan = StftPlan::<f64>::new(cfg).unwrap();
        let x = random_signal(96_000, 3);
        let spec = plan.forward(&x).unwrap();
        let y = plan.inverse(&spec, x.len()).unwrap();
        let covered = cfg.covered_len(x.len());
        let peak = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let max_err = (0..covered).map(|i| (x[i] - y[i]).abs()).fold(0.0, f64::max);
        assert!(max_err < 1e-4 * peak, "max error {max_err}");
        let sig: f64 = x[..covered].iter().map(|v| v * v).sum();
        let noise: f64 = (0..covered).map(|i| (x[i] - y[i]).powi(2)).sum();
        assert!(10.0 * (sig / noise).log10() > 60.0);
    }

    #[test]
    fn short_signals_use_repeated_reflection() {
        let plan = StftPlan::<f64>::new(StftConfig::default()).unwrap();
        let x = random_signal(100, 9);
        let spec = plan.forward(&x).unwrap();
        assert_eq!(spec.nrows(), 1);
        let y = plan.inverse(&spec, x.len()).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn adjoints_satisfy_dot_product_identity() {
        let cfg = StftConfig {
            hop: 40,
            fft_size: 64,
            window: Window::Hann,
            sample_rate: 8000,
        };
        let plan = StftPlan::<f64>::new(cfg).unwrap();
        let len = 333;
        let frames = cfg.n_frames(len);
        let x = random_signal(len, 1);
        let yr = random_signal(frames * cfg.n_bins(), 2);
        let yi = random_signal(frames * cfg.n_bins(), 3);
        let y = Array2::from_shape_fn((frames, cfg.n_bins()), |(t, k)| {
            Complex::new(yr[t * cfg.n_bins() + k], yi[t * cfg.n_bins() + k])
        });

        // <A x, y> = <x, A* y> for the forward transform
        let ax = plan.forward(&x).unwrap();
        let lhs: f64 = ax.iter().zip(y.iter()).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        let aty = plan.forward_adjoint(&y, len).unwrap();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));

        // and for the inverse transform
        let by = plan.inverse(&y, len).unwrap();
        let lhs: f64 = by.iter().zip(&x).map(|(a, b)| a * b).sum();
        let btx = plan.inverse_adjoint(&x, frames).unwrap();
        let rhs: f64 = btx.iter().zip(y.iter()).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
