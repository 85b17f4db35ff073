use complexdec::bitstream::{pack, unpack, BitstreamHeader, VERSION};
use ndarray::Array2;

fn pattern(frames: usize, stages: usize, bits: u8) -> Array2<u32> {
    Array2::from_shape_fn((frames, stages), |(t, s)| ((t * 97 + s * 131 + 7) % (1 << bits)) as u32)
}

fn check(file: &str, header: BitstreamHeader) {
    let golden = std::fs::read(format!("{}/tests/data/{file}", env!("CARGO_MANIFEST_DIR"))).unwrap();
    let idx = pattern(header.n_frames as usize, header.total_stages(), header.bits_per_index);
    assert_eq!(pack(idx.view(), &header).unwrap(), golden, "{file}");
    let (h, decoded) = unpack(&golden).unwrap();
    assert_eq!(h, header);
    assert_eq!(decoded, idx);
}

#[test]
fn default_config_golden_vector() {
    check(
        "default_3frames.cpxd",
        BitstreamHeader {
            version: VERSION,
            sample_rate: 48_000,
            hop: 320,
            fft_size: 510,
            n_stages_real: 8,
            n_stages_imag: 8,
            bits_per_index: 10,
            n_frames: 3,
            n_samples: 800,
        },
    );
}

#[test]
fn padded_frame_golden_vector() {
    check(
        "odd_5bit_4frames.cpxd",
        BitstreamHeader {
            version: VERSION,
            sample_rate: 44_100,
            hop: 256,
            fft_size: 1024,
            n_stages_real: 3,
            n_stages_imag: 2,
            bits_per_index: 5,
            n_frames: 4,
            n_samples: 1000,
        },
    );
}
