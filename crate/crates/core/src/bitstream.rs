//! `.cpxd` bitstream: a fixed 32-byte header, bit-packed code indices and a
//! CRC-32 trailer.
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `CPXD`                  |
//! | 4      | 1    | version (1)                   |
//! | 5      | 1    | bits per index (1..=16)       |
//! | 6      | 1    | real-branch stages            |
//! | 7      | 1    | imaginary-branch stages       |
//! | 8      | 4    | sample rate, u32 LE           |
//! | 12     | 4    | hop, u32 LE                   |
//! | 16     | 4    | FFT size, u32 LE              |
//! | 20     | 4    | frame count, u32 LE           |
//! | 24     | 8    | sample count, u64 LE          |
//! | 32     | ...  | frame payloads                |
//! | end-4  | 4    | CRC-32 of the payload, u32 LE |
//!
//! Each frame packs its indices MSB-first, real stages before imaginary
//! stages, and is zero-padded to a whole byte. The default configuration
//! (16 indices of 10 bits) uses exactly 20 bytes per frame.

use ndarray::{Array2, ArrayView2};
use num_rational::Ratio;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CPXD";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 32;
pub const TRAILER_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub version: u8,
    pub sample_rate: u32,
    pub hop: u32,
    pub fft_size: u32,
    pub n_stages_real: u8,
    pub n_stages_imag: u8,
    pub bits_per_index: u8,
    pub n_frames: u32,
    /// Length of the encoded waveform, so decoding restores the exact sample count.
    pub n_samples: u64,
}

impl BitstreamHeader {
    pub fn total_stages(&self) -> usize {
        self.n_stages_real as usize + self.n_stages_imag as usize
    }

    pub fn frame_bits(&self) -> usize {
        self.total_stages() * self.bits_per_index as usize
    }

    pub fn frame_bytes(&self) -> usize {
        self.frame_bits().div_ceil(8)
    }

    pub fn payload_bytes(&self) -> usize {
        self.n_frames as usize * self.frame_bytes()
    }

    pub fn stream_bytes(&self) -> usize {
        HEADER_LEN + self.payload_bytes() + TRAILER_LEN
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.bits_per_index) {
            return Err(Error::Format(format!(
                "bits per index {} outside 1..=16",
                self.bits_per_index
            )));
        }
        if self.total_stages() == 0 {
            return Err(Error::Format("no quantizer stages".into()));
        }
        Ok(())
    }

    fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(MAGIC);
        b[4] = self.version;
        b[5] = self.bits_per_index;
        b[6] = self.n_stages_real;
        b[7] = self.n_stages_imag;
        b[8..12].copy_from_slice(&self.sample_rate.to_le_bytes());
        b[12..16].copy_from_slice(&self.hop.to_le_bytes());
        b[16..20].copy_from_slice(&self.fft_size.to_le_bytes());
        b[20..24].copy_from_slice(&self.n_frames.to_le_bytes());
        b[24..32].copy_from_slice(&self.n_samples.to_le_bytes());
        b
    }

    fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < MAGIC.len() || &b[0..4] != MAGIC {
            return Err(Error::Format("missing CPXD magic".into()));
        }
        if b.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: b.len(),
            });
        }
        if b[4] != VERSION {
            return Err(Error::VersionMismatch {
                found: b[4],
                expected: VERSION,
            });
        }
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes"));
        let header = Self {
            version: b[4],
            bits_per_index: b[5],
            n_stages_real: b[6],
            n_stages_imag: b[7],
            sample_rate: u32_at(8),
            hop: u32_at(12),
            fft_size: u32_at(16),
            n_frames: u32_at(20),
            n_samples: u64::from_le_bytes(b[24..32].try_into().expect("8 bytes")),
        };
        header.validate()?;
        Ok(header)
    }
}

/// MSB-first bit writer.
struct BitWriter {
    bytes: Vec<u8>,
    acc: u32,
    filled: u32,
}

impl BitWriter {
    fn new(capacity: usize) -> Self {
        Self {
            bytes: Vec::with_capacity(capacity),
            acc: 0,
            filled: 0,
        }
    }

    fn put(&mut self, value: u32, bits: u32) {
        for i in (0..bits).rev() {
            self.acc = (self.acc << 1) | ((value >> i) & 1);
            self.filled += 1;
            if self.filled == 8 {
                self.bytes.push(self.acc as u8);
                self.acc = 0;
                self.filled = 0;
            }
        }
    }

    /// Zero-pads to the next byte boundary.
    fn align(&mut self) {
        if self.filled > 0 {
            self.bytes.push((self.acc << (8 - self.filled)) as u8);
            self.acc = 0;
            self.filled = 0;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    bit: usize,
}

impl<'a> BitReader<'a> {
    fn get(&mut self, bits: u32) -> u32 {
        let mut v = 0u32;
        for _ in 0..bits {
            let byte = self.bytes[self.bit / 8];
            v = (v << 1) | ((byte >> (7 - self.bit % 8)) & 1) as u32;
            self.bit += 1;
        }
        v
    }

    fn align(&mut self) {
        self.bit = self.bit.div_ceil(8) * 8;
    }
}

/// Serializes `n_frames x total_stages` indices (real stages first).
pub fn pack(indices: ArrayView2<u32>, header: &BitstreamHeader) -> Result<Vec<u8>> {
    header.validate()?;
    if header.version != VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            expected: VERSION,
        });
    }
    let expected = (header.n_frames as usize, header.total_stages());
    if indices.dim() != expected {
        return Err(Error::shape("bitstream indices", expected, indices.dim()));
    }
    let bits = header.bits_per_index as u32;
    let mut w = BitWriter::new(header.payload_bytes());
    for frame in indices.outer_iter() {
        for &idx in frame {
            if bits < 32 && idx >> bits != 0 {
                return Err(Error::IndexOverflow {
                    index: idx,
                    bits: header.bits_per_index,
                });
            }
            w.put(idx, bits);
        }
        w.align();
    }
    let payload = w.bytes;
    let mut out = Vec::with_capacity(header.stream_bytes());
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

/// Parses a stream written by [`pack`].
pub fn unpack(bytes: &[u8]) -> Result<(BitstreamHeader, Array2<u32>)> {
    let header = BitstreamHeader::from_bytes(bytes)?;
    let total = header.stream_bytes();
    if bytes.len() < total {
        return Err(Error::Truncated {
            expected: total,
            found: bytes.len(),
        });
    }
    if bytes.len() > total {
        return Err(Error::Format(format!(
            "{} trailing bytes after the stream",
            bytes.len() - total
        )));
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + header.payload_bytes()];
    let stored = u32::from_le_bytes(bytes[total - TRAILER_LEN..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let (frames, stages) = (header.n_frames as usize, header.total_stages());
    let mut r = BitReader { bytes: payload, bit: 0 };
    let mut indices = Array2::zeros((frames, stages));
    for t in 0..frames {
        for s in 0..stages {
            indices[[t, s]] = r.get(header.bits_per_index as u32);
        }
        r.align();
    }
    Ok((header, indices))
}

/// Bits per second carried by `n_codebooks` indices of `bits` each per frame.
pub fn bitrate(frame_rate: Ratio<u64>, n_codebooks: u64, bits: u64) -> Ratio<u64> {
    frame_rate * n_codebooks * bits
}

/// Input samples per second over latent values per second.
pub fn compression_ratio(sample_rate: u64, frame_rate: Ratio<u64>, code_dim: u64) -> Ratio<u64> {
    Ratio::from_integer(sample_rate) / (frame_rate * code_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_header(frames: u32) -> BitstreamHeader {
        BitstreamHeader {
            version: VERSION,
            sample_rate: 48_000,
            hop: 320,
            fft_size: 510,
            n_stages_real: 8,
            n_stages_imag: 8,
            bits_per_index: 10,
            n_frames: frames,
            n_samples: frames as u64 * 320,
        }
    }

    #[test]
    fn all_zero_and_all_ones_frames() {
        let h = default_header(1);
        let zeros = pack(Array2::zeros((1, 16)).view(), &h).unwrap();
        assert_eq!(&zeros[HEADER_LEN..HEADER_LEN + 20], &[0u8; 20]);
        let ones = pack(Array2::from_elem((1, 16), 1023).view(), &h).unwrap();
        assert_eq!(&ones[HEADER_LEN..HEADER_LEN + 20], &[0xFFu8; 20]);
        assert_eq!(ones.len(), HEADER_LEN + 20 + TRAILER_LEN);
    }

    #[test]
    fn one_second_is_24000_payload_bits() {
        let h = default_header(150);
        let bytes = pack(Array2::from_elem((150, 16), 517).view(), &h).unwrap();
        assert_eq!((bytes.len() - HEADER_LEN - TRAILER_LEN) * 8, 24_000);
    }

    #[test]
    fn error_cases_are_distinct() {
        let h = default_header(2);
        let good = pack(Array2::from_elem((2, 16), 5).view(), &h).unwrap();

        let overflow = pack(Array2::from_elem((2, 16), 1024).view(), &h);
        assert!(matches!(overflow, Err(Error::IndexOverflow { index: 1024, bits: 10 })));

        match unpack(&good[..good.len() - 3]) {
            Err(Error::Truncated { expected, found }) => {
                assert_eq!(expected, HEADER_LEN + 40 + TRAILER_LEN);
                assert_eq!(found, good.len() - 3);
            }
            other => panic!("{other:?}"),
        }
        let mut bad_magic = good.clone();
        bad_magic[1] = b'Q';
        assert!(matches!(unpack(&bad_magic), Err(Error::Format(_))));
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(unpack(&bad_version), Err(Error::VersionMismatch { found: 9, .. })));
        let mut flipped = good.clone();
        flipped[HEADER_LEN + 3] ^= 0x10;
        assert!(matches!(unpack(&flipped), Err(Error::Checksum { .. })));
        assert!(matches!(unpack(&good[..10]), Err(Error::Truncated { expected: HEADER_LEN, .. })));
    }

    #[test]
    fn bitrate_examples() {
        let r = |n| Ratio::from_integer(n);
        assert_eq!(bitrate(r(150), 16, 10), r(24_000));
        assert_eq!(bitrate(r(75), 16, 10), r(12_000));
        assert_eq!(bitrate(r(150), 8, 10), r(12_000));
    }

    #[test]
    fn compression_ratio_examples() {
        let fr = Ratio::from_integer(150);
        assert_eq!(compression_ratio(48_000, fr, 64), Ratio::from_integer(5));
        assert_eq!(compression_ratio(48_000, fr, 256), Ratio::new(5, 4));
        assert_eq!(compression_ratio(48_000, fr, 1024), Ratio::new(5, 16));
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(
            bits in 1u8..=16,
            real in 1u8..=16,
            imag in 0u8..=16,
            frames in 0u32..12,
            seed in any::<u64>(),
        ) {
            let h = BitstreamHeader {
                bits_per_index: bits,
                n_stages_real: real,
                n_stages_imag: imag,
                n_frames: frames,
                ..default_header(frames)
            };
            let stages = h.total_stages();
            let mut state = seed | 1;
            let idx = Array2::from_shape_fn((frames as usize, stages), |_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % (1u64 << bits)) as u32
            });
            let bytes = pack(idx.view(), &h).unwrap();
            prop_assert_eq!(bytes.len(), h.stream_bytes());
            let (h2, idx2) = unpack(&bytes).unwrap();
            prop_assert_eq!(h2, h);
            prop_assert_eq!(idx2, idx);
        }
    }
}
