//! Grayscale log-magnitude spectrogram images.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::dsp::{ComplexSpectrogram, StftPlan, StftConfig};
use crate::error::Result;
use crate::Scalar;

/// Magnitudes below this map to black.
pub const FLOOR_DB: f64 = -100.0;
/// Dynamic range shown below the loudest bin.
pub const RANGE_DB: f64 = 80.0;

/// One pixel column per frame, one row per bin with the lowest frequency at
/// the bottom. Brightness is linear in dB over [`RANGE_DB`] below the peak.
pub fn spectrogram_image<T: Scalar>(spec: &ComplexSpectrogram<T>) -> GrayImage {
    let (frames, bins) = spec.data.dim();
    let db = spec.data.mapv(|v| 20.0 * v.norm().as_f64().max(10f64.powf(FLOOR_DB / 20.0)).log10());
    let peak = db.iter().cloned().fold(FLOOR_DB, f64::max);
    let lo = (peak - RANGE_DB).max(FLOOR_DB);
    let span = peak - lo;
    GrayImage::from_fn(frames as u32, bins as u32, |x, y| {
        let v = db[[x as usize, bins - 1 - y as usize]];
        let level = if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
        Luma([(level * 255.0).round() as u8])
    })
}

pub fn export_spectrogram_image<T: Scalar>(spec: &ComplexSpectrogram<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    }
    spectrogram_image(spec).save(path)?;
    Ok(())
}

pub fn export_wave_spectrogram<T: Scalar>(wave: &[T], config: StftConfig, path: &Path) -> Result<()> {
    let data = StftPlan::new(config)?.forward(wave)?;
    export_spectrogram_image(&ComplexSpectrogram { data, config }, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_of(wave: &[f64]) -> GrayImage {
        let cfg = StftConfig::default();
        let data = StftPlan::new(cfg).unwrap().forward(wave).unwrap();
        spectrogram_image(&ComplexSpectrogram { data, config: cfg })
    }

    #[test]
    fn zero_wave_is_uniform_and_256_high() {
        let img = image_of(&vec![0.0; 4800]);
        assert_eq!(img.height(), 256);
        assert_eq!(img.width(), 15);
        assert!(img.pixels().all(|p| p.0[0] == 0));
    }

    #[test]
    fn sinusoid_lights_its_bin() {
        // bin 40 of a 510-point FFT at 48 kHz
        let f = 40.0 * 48_000.0 / 510.0;
        let wave: Vec<f64> = (0..9600).map(|n| (2.0 * std::f64::consts::PI * f * n as f64 / 48_000.0).sin()).collect();
        let img = image_of(&wave);
        let row = 255 - 40;
        for x in 2..img.width() - 2 {
            let brightest = (0..256).max_by_key(|&y| img.get_pixel(x, y).0[0]).unwrap();
            assert_eq!(brightest, row, "column {x}");
            assert_eq!(img.get_pixel(x, row).0[0], 255);
        }
    }

    #[test]
    fn writes_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.png");
        export_wave_spectrogram(&[0.1f32; 3200], StftConfig::default(), &path).unwrap();
        assert_eq!(image::open(&path).unwrap().height(), 256);
    }
}
