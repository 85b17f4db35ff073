//! Magnitude companding applied around the diffusion post-filter.

use ndarray::Array2;
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use super::stft::ComplexSpectrogram;
use crate::error::{Error, Result};
use crate::Scalar;

/// `x' = beta * |x|^alpha * e^{i angle(x)}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompandingParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for CompandingParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.15,
        }
    }
}

impl CompandingParams {
    pub fn identity() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "companding needs alpha > 0 and beta > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Scales the magnitude of `z` to `gain * |z|^power`, keeping its phase.
/// Zero stays zero.
#[inline]
fn reshape_magnitude<T: Scalar>(z: Complex<T>, power: T, gain: T) -> Complex<T> {
    let mag = z.norm();
    if mag == T::zero() {
        return Complex::new(T::zero(), T::zero());
    }
    // multiply the unit phasor instead of going through atan2 so the phase is untouched
    let scale = gain * mag.powf(power) / mag;
    Complex::new(z.re * scale, z.im * scale)
}

pub fn compand_matrix<T: Scalar>(data: &Array2<Complex<T>>, params: &CompandingParams) -> Array2<Complex<T>> {
    let (power, gain) = (T::lit(params.alpha), T::lit(params.beta));
    data.mapv(|z| reshape_magnitude(z, power, gain))
}

pub fn decompand_matrix<T: Scalar>(data: &Array2<Complex<T>>, params: &CompandingParams) -> Array2<Complex<T>> {
    let power = T::lit(1.0 / params.alpha);
    let inv_beta = T::lit(1.0 / params.beta);
    data.mapv(|z| {
        // |x| = (|x'| / beta)^(1/alpha)
        let scaled = Complex::new(z.re * inv_beta, z.im * inv_beta);
        reshape_magnitude(scaled, power, T::one())
    })
}

pub fn compand<T: Scalar>(spec: &ComplexSpectrogram<T>, params: &CompandingParams) -> Result<ComplexSpectrogram<T>> {
    params.validate()?;
    if !spec.is_finite() {
        return Err(Error::NonFinite("compand input"));
    }
    Ok(ComplexSpectrogram {
        data: compand_matrix(&spec.data, params),
        config: spec.config,
    })
}

pub fn decompand<T: Scalar>(spec: &ComplexSpectrogram<T>, params: &CompandingParams) -> Result<ComplexSpectrogram<T>> {
    params.validate()?;
    Ok(ComplexSpectrogram {
        data: decompand_matrix(&spec.data, params),
        config: spec.config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;

    fn one(z: Complex<f64>) -> ComplexSpectrogram<f64> {
        ComplexSpectrogram {
            data: Array2::from_elem((1, 1), z),
            config: StftConfig::default(),
        }
    }

    #[test]
    fn substitution_examples() {
        let p = CompandingParams::default();
        let c = compand(&one(Complex::new(1.0, 0.0)), &p).unwrap().data[[0, 0]];
        assert!((c - Complex::new(0.15, 0.0)).norm() < 1e-15);
        let c = compand(&one(Complex::new(-4.0, 0.0)), &p).unwrap().data[[0, 0]];
        assert!((c - Complex::new(-0.3, 0.0)).norm() < 1e-15);
        let c = compand(&one(Complex::new(0.0, 0.0)), &p).unwrap().data[[0, 0]];
        assert_eq!(c, Complex::new(0.0, 0.0));

        let d = decompand(&one(Complex::new(0.15, 0.0)), &p).unwrap().data[[0, 0]];
        assert!((d - Complex::new(1.0, 0.0)).norm() < 1e-12);
        let d = decompand(&one(Complex::new(-0.3, 0.0)), &p).unwrap().data[[0, 0]];
        assert!((d - Complex::new(-4.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn unit_parameters_are_identity() {
        let z = Complex::new(0.3, -2.5);
        let c = compand(&one(z), &CompandingParams::identity()).unwrap().data[[0, 0]];
        assert!((c - z).norm() < 1e-15);
    }

    #[test]
    fn invalid_parameters_and_non_finite_input_are_rejected() {
        let bad = CompandingParams { alpha: 0.0, beta: 0.15 };
        assert!(compand(&one(Complex::new(1.0, 0.0)), &bad).is_err());
        let p = CompandingParams::default();
        assert!(compand(&one(Complex::new(f64::NAN, 0.0)), &p).is_err());
    }

    #[test]
    fn phase_is_preserved() {
        let p = CompandingParams::default();
        for z in [Complex::new(3.0, 4.0), Complex::new(-1e-3, 2e-4), Complex::new(0.0, -7.0)] {
            let c = compand(&one(z), &p).unwrap().data[[0, 0]];
            assert!((c.arg() - z.arg()).abs() < 1e-14);
        }
    }
}
