//! Ornstein-Uhlenbeck variance-exploding SDE
//! `dx = gamma (x_hat - x) dt + g(t) dw` with
//! `g(t) = sigma_min (sigma_max / sigma_min)^t sqrt(2 ln(sigma_max / sigma_min))`.
//!
//! The drift is linear, so the state at time `t` is Gaussian. Variation of
//! constants gives the mean `x_hat + e^{-gamma t} (x0 - x_hat)` and the variance
//! `sigma_min^2 (rho^{2t} - e^{-2 gamma t}) ln(rho) / (gamma + ln(rho))`
//! where `rho = sigma_max / sigma_min`.

use ndarray::{Array2, Zip};
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdeConfig {
    /// Stiffness pulling the state towards the conditioner.
    pub gamma: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Terminal time.
    pub t_max: f64,
    /// Smallest time seen in training and the end point of sampling.
    pub t_eps: f64,
    pub n_steps: usize,
    /// Signal-to-noise ratio of the Langevin corrector.
    pub snr: f64,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self {
            gamma: 1.5,
            sigma_min: 0.05,
            sigma_max: 0.5,
            t_max: 1.0,
            t_eps: 0.03,
            n_steps: 30,
            snr: 0.5,
        }
    }
}

impl SdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.t_eps > 0.0 && self.t_eps < self.t_max) {
            return Err(Error::InvalidConfig(format!("need 0 < t_eps < T, got {} and {}", self.t_eps, self.t_max)));
        }
        if !(self.gamma >= 0.0 && self.snr > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig("gamma must be non-negative and snr positive".into()));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidConfig("n_steps must be at least 1".into()));
        }
        Ok(())
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.t_max).contains(&t) {
            return Err(Error::TimeOutOfRange { t, lo: 0.0, hi: self.t_max });
        }
        Ok(())
    }

    /// `g(t)`.
    pub fn diffusion_coeff(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let l = self.log_ratio();
        Ok(self.sigma_min * (l * t).exp() * (2.0 * l).sqrt())
    }

    /// Weight of `x0 - x_hat` in the mean at time `t`.
    pub fn mean_weight(&self, t: f64) -> f64 {
        (-self.gamma * t).exp()
    }

    /// Standard deviation of the perturbation kernel. Defined for any
    /// `t >= 0` so that the limit towards large `t` can be inspected.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::TimeOutOfRange { t, lo: 0.0, hi: f64::INFINITY });
        }
        let l = self.log_ratio();
        let var = self.sigma_min.powi(2) * ((2.0 * l * t).exp() - (-2.0 * self.gamma * t).exp()) * l / (self.gamma + l);
        Ok(var.max(0.0).sqrt())
    }
}

fn check_same<T>(a: &Array2<T>, b: &Array2<T>, context: &'static str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(context, a.dim(), b.dim()));
    }
    Ok(())
}

/// `gamma (x_hat - x_t)`.
pub fn drift<T: Scalar>(x_t: &Array2<Complex<T>>, x_hat: &Array2<Complex<T>>, cfg: &SdeConfig) -> Result<Array2<Complex<T>>> {
    check_same(x_t, x_hat, "drift")?;
    let g = T::lit(cfg.gamma);
    Ok(Zip::from(x_t).and(x_hat).map_collect(|&x, &c| (c - x) * g))
}

/// Mean and standard deviation of `x_t` given `x0` and the conditioner.
pub fn perturbation_kernel<T: Scalar>(
    x0: &Array2<Complex<T>>,
    x_hat: &Array2<Complex<T>>,
    t: f64,
    cfg: &SdeConfig,
) -> Result<(Array2<Complex<T>>, f64)> {
    check_same(x0, x_hat, "perturbation kernel")?;
    let sigma = cfg.sigma(t)?;
    let w = T::lit(cfg.mean_weight(t));
    let mean = Zip::from(x0).and(x_hat).map_collect(|&a, &c| c + (a - c) * w);
    Ok((mean, sigma))
}

/// `mean + sigma z`.
pub fn sample_xt<T: Scalar>(
    x0: &Array2<Complex<T>>,
    x_hat: &Array2<Complex<T>>,
    t: f64,
    z: &Array2<Complex<T>>,
    cfg: &SdeConfig,
) -> Result<Array2<Complex<T>>> {
    check_same(x0, z, "noise")?;
    let (mut mean, sigma) = perturbation_kernel(x0, x_hat, t, cfg)?;
    let s = T::lit(sigma);
    mean.zip_mut_with(z, |m, &n| *m = *m + n * s);
    Ok(mean)
}

/// Score of the Gaussian kernel, `-(x_t - mean) / sigma^2`.
pub fn true_score<T: Scalar>(x_t: &Array2<Complex<T>>, mean: &Array2<Complex<T>>, sigma: f64) -> Result<Array2<Complex<T>>> {
    check_same(x_t, mean, "true score")?;
    if !(sigma > 0.0) {
        return Err(Error::ZeroSigma);
    }
    let inv = T::lit(-1.0 / (sigma * sigma));
    Ok(Zip::from(x_t).and(mean).map_collect(|&x, &m| (x - m) * inv))
}
