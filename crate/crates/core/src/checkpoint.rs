//! Model archives: a tagged container of a JSON config, named `f32` tensors
//! and opaque blobs.
//!
//! | field            | encoding                                          |
//! |------------------|---------------------------------------------------|
//! | magic            | 4 bytes (`CPXM` codec, `CPXS` post-filter)        |
//! | version          | u32 LE                                            |
//! | config           | u32 LE length + UTF-8 JSON                        |
//! | tensor count     | u32 LE                                            |
//! | tensor           | u16 name length, name, u8 rank, u32 dims, f32 data |
//! | blob count       | u32 LE                                            |
//! | blob             | u16 name length, name, u64 length, bytes          |

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::Scalar;

pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub magic: [u8; 4],
    pub config_json: String,
    pub tensors: Vec<Tensor>,
    pub blobs: Vec<(String, Vec<u8>)>,
}

fn put_name(w: &mut impl Write, name: &str) -> std::io::Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| std::io::Error::other("name too long"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(name.as_bytes())
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("archive ended early: {e}")))?;
    Ok(b)
}

fn get_vec(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    r.take(len as u64).read_to_end(&mut b).map_err(|e| Error::Format(e.to_string()))?;
    if b.len() != len {
        return Err(Error::Format("archive ended early".into()));
    }
    Ok(b)
}

fn get_name(r: &mut impl Read) -> Result<String> {
    let len = u16::from_le_bytes(get(r)?) as usize;
    String::from_utf8(get_vec(r, len)?).map_err(|e| Error::Format(e.to_string()))
}

impl Archive {
    pub fn new(magic: [u8; 4], config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            magic,
            config_json: serde_json::to_string(config).map_err(|e| Error::Parse(e.to_string()))?,
            tensors: Vec::new(),
            blobs: Vec::new(),
        })
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_str(&self.config_json).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn push_params<'a, T: Scalar>(&mut self, params: impl IntoIterator<Item = &'a Param<T>>) {
        for p in params {
            self.tensors.push(Tensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.iter().map(|v| v.as_f32()).collect(),
            });
        }
    }

    /// Copies stored tensors into `params`, matching by position, name and shape.
    pub fn load_params<'a, T: Scalar + 'a>(&self, params: impl IntoIterator<Item = &'a mut Param<T>>) -> Result<()> {
        let mut n = 0;
        for (p, t) in params.into_iter().zip(&self.tensors) {
            if p.name != t.name || p.value.shape() != t.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match parameter {} {:?}",
                    t.name,
                    t.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = ArrayD::from_shape_vec(IxDyn(&t.shape), t.data.iter().map(|&v| T::lit(v as f64)).collect())
                .map_err(|e| Error::Format(e.to_string()))?;
            n += 1;
        }
        if n != self.tensors.len() {
            return Err(Error::Format(format!("archive holds {} tensors, model has {n}", self.tensors.len())));
        }
        Ok(())
    }

    pub fn blob(&self, name: &str) -> Result<&[u8]> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| Error::Format(format!("archive has no blob `{name}`")))
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.magic)?;
        w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
        w.write_all(&(self.config_json.len() as u32).to_le_bytes())?;
        w.write_all(self.config_json.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            put_name(&mut w, &t.name)?;
            w.write_all(&[t.shape.len() as u8])?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&(self.blobs.len() as u32).to_le_bytes())?;
        for (name, bytes) in &self.blobs {
            put_name(&mut w, name)?;
            w.write_all(&(bytes.len() as u64).to_le_bytes())?;
            w.write_all(bytes)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read, magic: [u8; 4]) -> Result<Self> {
        let found: [u8; 4] = get(&mut r)?;
        if found != magic {
            return Err(Error::Format(format!(
                "expected archive tag {:?}, found {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&found)
            )));
        }
        let version = u32::from_le_bytes(get(&mut r)?);
        if version != ARCHIVE_VERSION {
            return Err(Error::VersionMismatch {
                found: version.min(255) as u8,
                expected: ARCHIVE_VERSION as u8,
            });
        }
        let len = u32::from_le_bytes(get(&mut r)?) as usize;
        let config_json = String::from_utf8(get_vec(&mut r, len)?).map_err(|e| Error::Format(e.to_string()))?;
        let n = u32::from_le_bytes(get(&mut r)?);
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name = get_name(&mut r)?;
            let [rank] = get::<1>(&mut r)?;
            let shape = (0..rank)
                .map(|_| Ok(u32::from_le_bytes(get(&mut r)?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = get_vec(&mut r, count * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(Tensor { name, shape, data });
        }
        let n = u32::from_le_bytes(get(&mut r)?);
        let mut blobs = Vec::new();
        for _ in 0..n {
            let name = get_name(&mut r)?;
            let len = u64::from_le_bytes(get(&mut r)?) as usize;
            blobs.push((name, get_vec(&mut r, len)?));
        }
        Ok(Self {
            magic,
            config_json,
            tensors,
            blobs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).map_err(|e| Error::io(path, e))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, magic: [u8; 4]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice(), magic)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip() {
        let mut a = Archive::new(*b"TEST", &serde_json::json!({"k": 3})).unwrap();
        let p = Param::<f64>::zeros("layer.weight", &[2, 3]);
        a.push_params([&p]);
        a.blobs.push(("extra".into(), vec![1, 2, 3]));
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        let b = Archive::read_from(bytes.as_slice(), *b"TEST").unwrap();
        assert_eq!(a, b);
        assert_eq!(b.blob("extra").unwrap(), &[1, 2, 3]);
        assert!(Archive::read_from(bytes.as_slice(), *b"CPXM").is_err());
        assert!(Archive::read_from(&bytes[..bytes.len() - 1], *b"TEST").is_err());
        let mut wrong = Param::<f64>::zeros("layer.weight", &[3, 2]);
        assert!(b.load_params([&mut wrong]).is_err());
    }
}
