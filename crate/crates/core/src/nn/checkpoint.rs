//! Named-array checkpoints.
//!
//! Layout: the magic `SPCKPT01`, a little-endian `u64` header length, a JSON
//! header `{dtype, config, arrays: [{name, shape}]}`, then every array's
//! values in header order as little-endian `f32` or `f64`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::{Module, Real, Tensor};

const MAGIC: &[u8; 8] = b"SPCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `"f32"` or `"f64"`; values round-trip exactly in this precision.
    pub dtype: String,
    pub config: serde_json::Value,
    pub arrays: BTreeMap<String, NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: serde_json::Value,
    arrays: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
}

fn to_array<T: Real>(t: &Tensor<T>) -> NamedArray {
    NamedArray {
        shape: t.shape().to_vec(),
        data: t.to_f64_vec(),
    }
}

impl Checkpoint {
    /// Snapshot of all parameters and buffers of `module`.
    pub fn capture<T: Real>(module: &dyn Module<T>, config: serde_json::Value) -> Self {
        let mut arrays = BTreeMap::new();
        module.visit("", &mut |name, p| {
            arrays.insert(name.to_string(), to_array(&p.value));
        });
        module.visit_buffers("", &mut |name, t| {
            arrays.insert(name.to_string(), to_array(t));
        });
        Self {
            dtype: T::NAME.to_string(),
            config,
            arrays,
        }
    }

    /// Overwrites every parameter and buffer of `module` from the snapshot.
    pub fn restore<T: Real>(&self, module: &mut dyn Module<T>) -> Result<()> {
        let mut err = None;
        let arrays = &self.arrays;
        let mut assign = |name: &str, t: &mut Tensor<T>| {
            if err.is_some() {
                return;
            }
            match arrays.get(name) {
                None => err = Some(Error::Lookup(format!("checkpoint has no array {name}"))),
                Some(a) if a.shape != t.shape() => {
                    err = Some(Error::Dimension(format!(
                        "checkpoint array {name} has shape {:?}, model expects {:?}",
                        a.shape,
                        t.shape()
                    )))
                }
                Some(a) => {
                    for (d, &v) in t.data_mut().iter_mut().zip(&a.data) {
                        *d = T::of(v);
                    }
                }
            }
        };
        module.visit_mut("", &mut |name, p| assign(name, &mut p.value));
        module.visit_buffers_mut("", &mut |name, t| assign(name, t));
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            dtype: self.dtype.clone(),
            config: self.config.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, a)| HeaderEntry {
                    name: name.clone(),
                    shape: a.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in self.arrays.values() {
            match self.dtype.as_str() {
                "f32" => a
                    .data
                    .iter()
                    .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                "f64" => a
                    .data
                    .iter()
                    .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
                other => return Err(Error::Configuration(format!("unsupported dtype {other}"))),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(8, "header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::format(16, format!("unsupported dtype {other}"))),
        };
        let mut pos = body;
        let mut arrays = BTreeMap::new();
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let end = pos + n * width;
            if end > bytes.len() {
                return Err(Error::format(pos, format!("array {} truncated", e.name)));
            }
            let data = bytes[pos..end]
                .chunks_exact(width)
                .map(|c| match width {
                    4 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                    _ => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                })
                .collect();
            arrays.insert(
                e.name,
                NamedArray {
                    shape: e.shape,
                    data,
                },
            );
            pos = end;
        }
        if pos != bytes.len() {
            return Err(Error::format(pos, "trailing bytes after last array"));
        }
        Ok(Self {
            dtype: header.dtype,
            config: header.config,
            arrays,
        })
    }

    /// Writes atomically: a temporary file in the target directory is renamed
    /// over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Arrays whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> BTreeMap<&str, &NamedArray> {
        self.arrays
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.as_str(), v))
            .collect()
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_f32_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lin = Linear::<f32>::new(5, 3, &mut rng);
        let ck = Checkpoint::capture(&lin, serde_json::json!({"k": 1}));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let mut other = Linear::<f32>::new(5, 3, &mut rng);
        back.restore(&mut other).unwrap();
        assert_eq!(other.weight.value, lin.weight.value);
        assert_eq!(other.bias.value, lin.bias.value);
    }

    #[test]
    fn shape_mismatch_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::<f64>::new(2, 2, &mut rng);
        let ck = Checkpoint::capture(&lin, serde_json::Value::Null);
        let mut wrong = Linear::<f64>::new(3, 2, &mut rng);
        assert!(matches!(ck.restore(&mut wrong), Err(Error::Dimension(_))));
        let mut bytes = ck.to_bytes().unwrap();
        bytes.pop();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format { .. })
        ));
        assert!(Checkpoint::from_bytes(b"nonsense-bytes-here").is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::<f64>::new(4, 4, &mut rng);
        let ck = Checkpoint::capture(&lin, serde_json::json!("cfg"));
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
