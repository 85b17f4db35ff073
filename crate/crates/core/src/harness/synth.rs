//! Deterministic speech-like test signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Gaussian formant bump.
fn formant_gain(f: f64, center: f64, width: f64) -> f64 {
    (-0.5 * ((f - center) / width).powi(2)).exp()
}

/// RMS of the background noise present everywhere, pauses included (-60 dBFS).
pub const NOISE_FLOOR: f64 = 1e-3;

/// A syllabic synthetic utterance: voiced segments with a gliding pitch and
/// moving formants, short fricative noise bursts and pauses, over a faint
/// white background like any real recording has.
pub fn synthetic_utterance(seconds: f64, sample_rate: u32, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let len = (seconds * sr).round() as usize;
    let mut out = vec![0.0f32; len];

    let mut start = (0.05 * sr) as usize;
    let mut phase = 0.0f64;
    while start < len {
        let dur = (rng.random_range(0.12..0.32) * sr) as usize;
        let end = (start + dur).min(len);
        let voiced = rng.random_bool(0.8);
        let f0_a = rng.random_range(95.0..190.0);
        let f0_b = f0_a * rng.random_range(0.8..1.25);
        let (f1a, f1b) = (rng.random_range(300.0..850.0), rng.random_range(300.0..850.0));
        let (f2a, f2b) = (rng.random_range(900.0..2400.0), rng.random_range(900.0..2400.0));
        let level = rng.random_range(0.15..0.35);
        let noise_level = if voiced { 0.01 } else { rng.random_range(0.03..0.08) };
        let mut hp_prev = 0.0f64;
        for (n, y) in out.iter_mut().enumerate().take(end).skip(start) {
            let u = (n - start) as f64 / (end - start).max(1) as f64;
            let env = (std::f64::consts::PI * u).sin().powf(0.7);
            let mut v = 0.0;
            if voiced {
                let f0 = f0_a + (f0_b - f0_a) * u;
                let (f1, f2) = (f1a + (f1b - f1a) * u, f2a + (f2b - f2a) * u);
                phase = (phase + f0 / sr).fract();
                let mut h = 1;
                while (h as f64) * f0 < 5000.0 {
                    let f = h as f64 * f0;
                    let gain = (0.4 * formant_gain(f, f1, 120.0) + 0.25 * formant_gain(f, f2, 180.0) + 0.02) / (h as f64).sqrt();
                    v += gain * (2.0 * std::f64::consts::PI * h as f64 * phase).sin();
                    h += 1;
                }
            }
            // crude high-pass on white noise for fricative colour
            let w: f64 = StandardNormal.sample(&mut rng);
            let hp = w - hp_prev;
            hp_prev = w;
            *y = (level * env * v + noise_level * env * hp) as f32;
        }
        let pause = if rng.random_bool(0.25) { rng.random_range(0.05..0.2) } else { 0.02 };
        start = end + (pause * sr) as usize;
    }
    let mut bg = ChaCha8Rng::seed_from_u64(seed);
    bg.set_stream(1);
    for y in &mut out {
        let w: f64 = StandardNormal.sample(&mut bg);
        *y += (NOISE_FLOOR * w) as f32;
    }
    out
}
