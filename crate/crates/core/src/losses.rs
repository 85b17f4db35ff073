//! Generator objective: complex spectral MSE/MAE, multi-resolution log-mel L1
//! and the commitment term, combined with fixed weights.
//!
//! Every term uses mean reduction so the weights do not depend on batch or
//! segment size. Gradient helpers return derivatives with respect to the
//! second (estimate) argument, packed as `Complex(d/d re, d/d im)`.

use ndarray::{Array2, Zip};
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::dsp::{MelAnalyzer, MelConfig};
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub vq: f64,
    pub mel: f64,
    pub mse: f64,
    pub mae: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            vq: 1.0,
            mel: 45.0,
            mse: 200.0,
            mae: 200.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("vq", self.vq), ("mel", self.mel), ("mse", self.mse), ("mae", self.mae)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidConfig(format!("loss weight {name} = {w}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub vq: f64,
    pub mel: f64,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: LossTerms,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossReport {
    /// One JSON object per line, tagged with the training step.
    pub fn to_json_line(&self, step: usize) -> String {
        serde_json::json!({
            "step": step,
            "total": self.total,
            "vq": self.terms.vq,
            "mel": self.terms.mel,
            "mse": self.terms.mse,
            "mae": self.terms.mae,
        })
        .to_string()
    }
}

/// Weighted sum of the terms. Non-finite terms are rejected by name.
pub fn total_loss(terms: LossTerms, weights: &LossWeights) -> Result<LossReport> {
    for (name, v) in [("vq", terms.vq), ("mel", terms.mel), ("mse", terms.mse), ("mae", terms.mae)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
    }
    weights.validate()?;
    let total = weights.vq * terms.vq + weights.mel * terms.mel + weights.mse * terms.mse + weights.mae * terms.mae;
    Ok(LossReport {
        terms,
        weights: *weights,
        total,
    })
}

fn check_same<T>(x: &Array2<Complex<T>>, x_hat: &Array2<Complex<T>>, ctx: &'static str) -> Result<()> {
    if x.dim() != x_hat.dim() {
        return Err(Error::shape(ctx, x.dim(), x_hat.dim()));
    }
    if x.is_empty() {
        return Err(Error::EmptyInput(ctx));
    }
    Ok(())
}

/// `mean((dre^2 + dim^2) / 2)`.
pub fn complex_mse<T: Scalar>(x: &Array2<Complex<T>>, x_hat: &Array2<Complex<T>>) -> Result<T> {
    check_same(x, x_hat, "complex mse")?;
    let mut acc = 0.0f64;
    Zip::from(x).and(x_hat).for_each(|a, b| acc += (*b - *a).norm_sqr().as_f64());
    Ok(T::lit(acc / (2 * x.len()) as f64))
}

pub fn complex_mse_grad<T: Scalar>(x: &Array2<Complex<T>>, x_hat: &Array2<Complex<T>>) -> Result<Array2<Complex<T>>> {
    check_same(x, x_hat, "complex mse")?;
    let scale = T::one() / T::from_usize_lossy(x.len());
    Ok(Zip::from(x).and(x_hat).map_collect(|a, b| (*b - *a) * scale))
}

/// `mean(|x - x_hat|)` over complex entries.
pub fn complex_mae<T: Scalar>(x: &Array2<Complex<T>>, x_hat: &Array2<Complex<T>>) -> Result<T> {
    check_same(x, x_hat, "complex mae")?;
    let mut acc = 0.0f64;
    Zip::from(x).and(x_hat).for_each(|a, b| acc += (*b - *a).norm().as_f64());
    Ok(T::lit(acc / x.len() as f64))
}

/// Subgradient with zero at coincident entries.
pub fn complex_mae_grad<T: Scalar>(x: &Array2<Complex<T>>, x_hat: &Array2<Complex<T>>) -> Result<Array2<Complex<T>>> {
    check_same(x, x_hat, "complex mae")?;
    let n = T::from_usize_lossy(x.len());
    Ok(Zip::from(x).and(x_hat).map_collect(|a, b| {
        let d = *b - *a;
        let m = d.norm();
        if m > T::zero() {
            d / (m * n)
        } else {
            Complex::new(T::zero(), T::zero())
        }
    }))
}

/// Log-mel L1 distance averaged over several analysis resolutions.
pub struct MultiResMelLoss<T: Scalar> {
    analyzers: Vec<MelAnalyzer<T>>,
}

impl<T: Scalar> MultiResMelLoss<T> {
    pub fn new(configs: &[MelConfig]) -> Result<Self> {
        if configs.is_empty() {
            return Err(Error::InvalidConfig("mel loss needs at least one resolution".into()));
        }
        Ok(Self {
            analyzers: configs.iter().map(|c| MelAnalyzer::new(*c)).collect::<Result<_>>()?,
        })
    }

    /// Hops 50/120/240 with FFT sizes 512/1024/2048.
    pub fn standard(sample_rate: u32) -> Result<Self> {
        Self::new(&MelConfig::multi_resolution(sample_rate))
    }

    pub fn loss(&self, wave: &[T], wave_hat: &[T]) -> Result<T> {
        Ok(self.eval(wave, wave_hat, false)?.0)
    }

    /// Loss and its gradient with respect to `wave_hat`.
    pub fn loss_and_grad(&self, wave: &[T], wave_hat: &[T]) -> Result<(T, Vec<T>)> {
        let (l, g) = self.eval(wave, wave_hat, true)?;
        Ok((l, g.expect("gradient requested")))
    }

    fn eval(&self, wave: &[T], wave_hat: &[T], with_grad: bool) -> Result<(T, Option<Vec<T>>)> {
        if wave.len() != wave_hat.len() {
            return Err(Error::shape("mel loss", wave.len(), wave_hat.len()));
        }
        let n_res = T::from_usize_lossy(self.analyzers.len());
        let mut total = T::zero();
        let mut grad = with_grad.then(|| vec![T::zero(); wave.len()]);
        for a in &self.analyzers {
            let (target, _) = a.log_mel(wave)?;
            let (est, cache) = a.log_mel(wave_hat)?;
            let n = T::from_usize_lossy(target.len());
            let mut sum = T::zero();
            Zip::from(&target).and(&est).for_each(|&t, &e| sum += (e - t).abs());
            total += sum / n / n_res;
            if let Some(g) = grad.as_mut() {
                let scale = T::one() / (n * n_res);
                let g_log = Zip::from(&target).and(&est).map_collect(|&t, &e| {
                    if e > t {
                        scale
                    } else if e < t {
                        -scale
                    } else {
                        T::zero()
                    }
                });
                for (acc, v) in g.iter_mut().zip(a.log_mel_backward(&cache, &g_log)?) {
                    *acc += v;
                }
            }
        }
        Ok((total, grad))
    }
}

/// Multi-resolution mel loss at the standard resolutions.
pub fn multires_mel_loss<T: Scalar>(wave: &[T], wave_hat: &[T], sample_rate: u32) -> Result<T> {
    MultiResMelLoss::standard(sample_rate)?.loss(wave, wave_hat)
}
