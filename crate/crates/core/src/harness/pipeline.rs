//! Waveform to `.cpxd` bytes and back.

use ndarray::{concatenate, Array2, Axis};

use crate::bitstream::{pack, unpack, BitstreamHeader, VERSION};
use crate::codec::{CodecConfig, CodecModel, Codes};
use crate::diffusion::Spf;
use crate::error::{Error, Result};

/// Header describing `codes` under `config`.
pub fn header_for(config: &CodecConfig, codes: &Codes) -> Result<BitstreamHeader> {
    let narrow = |v: usize, what: &str| u8::try_from(v).map_err(|_| Error::InvalidConfig(format!("{what} {v} does not fit the header")));
    Ok(BitstreamHeader {
        version: VERSION,
        sample_rate: config.sample_rate,
        hop: config.hop as u32,
        fft_size: config.fft_size as u32,
        n_stages_real: narrow(config.n_stages_real, "real stage count")?,
        n_stages_imag: narrow(config.n_stages_imag, "imaginary stage count")?,
        bits_per_index: config.bits,
        n_frames: u32::try_from(codes.real.nrows()).map_err(|_| Error::InvalidConfig("too many frames".into()))?,
        n_samples: codes.n_samples as u64,
    })
}

pub fn codes_to_bytes(config: &CodecConfig, codes: &Codes) -> Result<Vec<u8>> {
    if codes.real.nrows() != codes.imag.nrows() {
        return Err(Error::shape("code frames", codes.real.nrows(), codes.imag.nrows()));
    }
    let header = header_for(config, codes)?;
    let all = concatenate(Axis(1), &[codes.real.view(), codes.imag.view()]).map_err(|e| Error::Format(e.to_string()))?;
    pack(all.mapv(|v| v as u32).view(), &header)
}

/// Parses a stream and checks that it was made with a codec of `config`'s shape.
pub fn bytes_to_codes(config: &CodecConfig, bytes: &[u8]) -> Result<Codes> {
    let (h, idx) = unpack(bytes)?;
    let matches = h.sample_rate == config.sample_rate
        && h.hop as usize == config.hop
        && h.fft_size as usize == config.fft_size
        && h.bits_per_index == config.bits
        && h.n_stages_real as usize == config.n_stages_real
        && h.n_stages_imag as usize == config.n_stages_imag;
    if !matches {
        return Err(Error::Format(format!("stream header {h:?} does not match the codec configuration")));
    }
    let split = config.n_stages_real;
    let to_usize = |a: Array2<u32>| a.mapv(|v| v as usize);
    Ok(Codes {
        real: to_usize(idx.slice(ndarray::s![.., ..split]).to_owned()),
        imag: to_usize(idx.slice(ndarray::s![.., split..]).to_owned()),
        n_samples: usize::try_from(h.n_samples).map_err(|_| Error::Format("sample count too large".into()))?,
    })
}

pub fn encode_to_bytes(model: &CodecModel<f32>, wave: &[f32]) -> Result<Vec<u8>> {
    codes_to_bytes(&model.config, &model.encode_wave(wave)?)
}

/// Decodes a stream, optionally refining the decoded spectrum with the
/// post-filter before synthesis.
pub fn decode_from_bytes(model: &CodecModel<f32>, bytes: &[u8], spf: Option<(&Spf<f32>, u64)>) -> Result<Vec<f32>> {
    let codes = bytes_to_codes(&model.config, bytes)?;
    let mut spec = model.decode_codes(&codes)?;
    if let Some((spf, seed)) = spf {
        spec = spf.enhance(&spec, seed)?;
    }
    model.synthesize(&spec, codes.n_samples)
}
