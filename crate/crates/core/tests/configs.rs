//! The shipped TOML configs parse and validate.

use std::path::PathBuf;

use complexdec::harness::{CodecTrainFile, SpfTrainFile};

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn codec_configs() {
    let tiny = CodecTrainFile::load(&config("desk_tiny.toml")).unwrap();
    tiny.codec.validate().unwrap();
    tiny.train.validate(tiny.codec.hop).unwrap();
    assert_eq!(tiny.codec.bitrate(), 2400.0);

    let full = CodecTrainFile::load(&config("full.toml")).unwrap();
    full.codec.validate().unwrap();
    full.train.validate(full.codec.hop).unwrap();
    assert_eq!(full.codec.bitrate(), 24_000.0);
}

#[test]
fn spf_configs() {
    for name in ["spf_desk.toml", "spf_full.toml"] {
        let f = SpfTrainFile::load(&config(name)).unwrap();
        f.spf.validate().unwrap();
        f.train.validate(320).unwrap();
        assert_eq!(f.spf.prior_variance, None, "{name}: estimated during training");
    }
}
