//! Objective reconstruction metrics.

use crate::error::{Error, Result};
use crate::Scalar;

/// Upper bound reported for (numerically) exact matches.
pub const SI_SDR_CAP_DB: f64 = 100.0;

/// Scale-invariant signal-to-distortion ratio in dB.
///
/// The estimate is projected onto the reference; the projection is the
/// target and the remainder the distortion. Results are clamped to
/// `[-SI_SDR_CAP_DB, SI_SDR_CAP_DB]`.
pub fn si_sdr<T: Scalar>(reference: &[T], estimate: &[T]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::shape("si-sdr", reference.len(), estimate.len()));
    }
    let (mut dot, mut ref_energy) = (0.0f64, 0.0f64);
    for (&r, &e) in reference.iter().zip(estimate) {
        let (r, e) = (r.as_f64(), e.as_f64());
        dot += r * e;
        ref_energy += r * r;
    }
    if ref_energy == 0.0 {
        return Err(Error::ZeroReference);
    }
    let scale = dot / ref_energy;
    let (mut target, mut noise) = (0.0f64, 0.0f64);
    for (&r, &e) in reference.iter().zip(estimate) {
        let t = scale * r.as_f64();
        target += t * t;
        noise += (e.as_f64() - t).powi(2);
    }
    let db = 10.0 * (target / noise).log10();
    Ok(if db.is_nan() { -SI_SDR_CAP_DB } else { db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB) })
}

/// Mean squared sample difference.
pub fn wav_mse<T: Scalar>(reference: &[T], estimate: &[T]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::shape("wav mse", reference.len(), estimate.len()));
    }
    if reference.is_empty() {
        return Err(Error::EmptyInput("wav mse"));
    }
    let sum: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(sum / reference.len() as f64)
}
