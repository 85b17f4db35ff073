//! Dataset manifests and segment sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::read_wav;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    /// Seconds; informational.
    #[serde(default)]
    pub duration: f64,
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "train".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
    #[serde(default)]
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

fn default_rate() -> u32 {
    48_000
}

/// One decoded file.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub path: PathBuf,
    pub samples: Vec<f32>,
}

impl DatasetManifest {
    pub fn single(path: impl Into<PathBuf>, split: &str) -> Self {
        Self {
            sample_rate: default_rate(),
            entries: vec![ManifestEntry {
                path: path.into(),
                duration: 0.0,
                split: split.into(),
            }],
            root: PathBuf::new(),
        }
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut m: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        m.root = root.into();
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    /// Reads every entry of `split`. Unreadable or empty files, and files
    /// not at the manifest's sample rate (nothing is resampled), are skipped
    /// with a warning; having none left is an error.
    pub fn load_split(&self, split: &str) -> Result<Vec<Utterance>> {
        let mut out = Vec::new();
        for entry in self.entries.iter().filter(|e| e.split == split) {
            let path = self.resolve(entry);
            match read_wav::<f32>(&path) {
                Ok(w) if w.sample_rate != self.sample_rate => {
                    log::warn!("{}: {} Hz, expected {} Hz, skipped", path.display(), w.sample_rate, self.sample_rate)
                }
                Ok(w) if !w.samples.is_empty() => out.push(Utterance { path, samples: w.samples }),
                Ok(_) => log::warn!("{}: no samples, skipped", path.display()),
                Err(e) => log::warn!("{}: {e}, skipped", path.display()),
            }
        }
        if out.is_empty() {
            return Err(Error::NoUsableAudio);
        }
        Ok(out)
    }
}

/// `len` samples of `samples` starting at `offset`, wrapping around to loop-pad
/// short inputs.
pub fn looped_segment(samples: &[f32], offset: usize, len: usize) -> Vec<f32> {
    (0..len).map(|i| samples[(offset + i) % samples.len()]).collect()
}

/// A random crop of `len` samples from a random utterance.
pub fn random_segment(utterances: &[Utterance], len: usize, rng: &mut impl Rng) -> Vec<f32> {
    let u = &utterances[rng.random_range(0..utterances.len())];
    let n = u.samples.len();
    let offset = if n > len { rng.random_range(0..=n - len) } else { 0 };
    looped_segment(&u.samples, offset, len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{write_wav, PcmDepth, WaveSegment};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn manifest_parses_and_skips_unreadable_files() {
        let dir = tempfile::tempdir().unwrap();
        let wave = WaveSegment::new(vec![0.1f32, -0.2, 0.3], 48_000).unwrap();
        write_wav(&dir.path().join("a.wav"), &wave, PcmDepth::Bits16).unwrap();
        fs::write(dir.path().join("broken.wav"), b"nope").unwrap();
        let text = r#"
            sample_rate = 48000
            [[entries]]
            path = "a.wav"
            duration = 0.0000625
            [[entries]]
            path = "broken.wav"
            [[entries]]
            path = "a.wav"
            split = "test"
        "#;
        let m = DatasetManifest::parse(text, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.entries[1].split, "train");
        let train = m.load_split("train").unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(train[0].samples.len(), 3);
        assert!(matches!(m.load_split("dev"), Err(Error::NoUsableAudio)));
        let only_broken = DatasetManifest::single(dir.path().join("broken.wav"), "train");
        assert!(matches!(only_broken.load_split("train"), Err(Error::NoUsableAudio)));
        let again = DatasetManifest::parse(&m.to_toml().unwrap(), dir.path()).unwrap();
        assert_eq!(again.entries, m.entries);
    }

    #[test]
    fn other_sample_rates_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let wave = WaveSegment::new(vec![0.1f32; 16], 16_000).unwrap();
        write_wav(&dir.path().join("low.wav"), &wave, PcmDepth::Bits16).unwrap();
        let m = DatasetManifest::single(dir.path().join("low.wav"), "train");
        assert!(matches!(m.load_split("train"), Err(Error::NoUsableAudio)));
    }

    #[test]
    fn short_files_are_loop_padded() {
        assert_eq!(looped_segment(&[1.0, 2.0, 3.0], 0, 7), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0]);
        let u = vec![Utterance {
            path: PathBuf::new(),
            samples: vec![1.0, 2.0],
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_segment(&u, 5, &mut rng), vec![1.0, 2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn crops_stay_inside_long_files() {
        let u = vec![Utterance {
            path: PathBuf::new(),
            samples: (0..100).map(|v| v as f32).collect(),
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = random_segment(&u, 10, &mut rng);
            assert!(s.windows(2).all(|w| w[1] == w[0] + 1.0));
        }
    }
}
