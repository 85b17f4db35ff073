//! PCM WAV reading and writing (mono, 16/24-bit).

use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use super::stft::WaveSegment;
use crate::error::{Error, Result};
use crate::Scalar;

pub const NATIVE_RATE: u32 = 48_000;

/// Reads a mono PCM WAV file. Multi-channel files are rejected; files at a
/// rate other than 48 kHz are accepted as-is with a warning.
pub fn read_wav<T: Scalar>(path: impl AsRef<Path>) -> Result<WaveSegment<T>> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::InvalidConfig(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != NATIVE_RATE {
        log::warn!(
            "{}: sample rate {} Hz differs from {NATIVE_RATE} Hz; not resampling",
            path.display(),
            spec.sample_rate
        );
    }
    let samples: Vec<T> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ (16 | 24)) => {
            let scale = 1.0 / (1i64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| T::lit(v as f64 * scale)))
                .collect::<std::result::Result<_, _>>()?
        }
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| T::lit(v as f64)))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::InvalidConfig(format!(
                "{}: unsupported sample format {fmt:?}/{bits}-bit",
                path.display()
            )))
        }
    };
    WaveSegment::new(samples, spec.sample_rate)
}

/// Bit depth used when writing PCM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcmDepth {
    Bits16,
    Bits24,
}

/// Writes a mono PCM WAV, clipping to [-1, 1].
pub fn write_wav<T: Scalar>(path: impl AsRef<Path>, wave: &WaveSegment<T>, depth: PcmDepth) -> Result<()> {
    let bits = match depth {
        PcmDepth::Bits16 => 16,
        PcmDepth::Bits24 => 24,
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: bits,
        sample_format: SampleFormat::Int,
    };
    let full_scale = (1i64 << (bits - 1)) as f64;
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    for &s in &wave.samples {
        let v = (s.as_f64() * full_scale).round().clamp(-full_scale, full_scale - 1.0) as i32;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm_round_trip_within_quantization_step() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<f64> = (0..480).map(|i| (i as f64 * 0.05).sin() * 0.8).collect();
        let wave = WaveSegment::new(samples.clone(), 48_000).unwrap();
        for (depth, step) in [(PcmDepth::Bits16, 0.5 / 32768.0), (PcmDepth::Bits24, 0.5 / 8_388_608.0)] {
            let path = dir.path().join("x.wav");
            write_wav(&path, &wave, depth).unwrap();
            let back: WaveSegment<f64> = read_wav(&path).unwrap();
            assert_eq!(back.len(), samples.len());
            for (a, b) in samples.iter().zip(&back.samples) {
                assert!((a - b).abs() <= step * 1.000001);
            }
        }
    }

    #[test]
    fn other_rates_are_kept_as_is() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.wav");
        let wave = WaveSegment::new(vec![0.0f32; 100], 16_000).unwrap();
        write_wav(&path, &wave, PcmDepth::Bits16).unwrap();
        let back: WaveSegment<f32> = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16_000);
    }
}
