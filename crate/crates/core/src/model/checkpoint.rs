//! Checkpoint file: a magic line, the byte length of a JSON header, the
//! header, then every tensor as little-endian `f32` in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamWConfig, ModelConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngState;

pub const CHECKPOINT_MAGIC: &str = "SPHERE-ICL-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub step: u64,
    pub rng: BTreeMap<String, RngState>,
    /// Free-form run context (experiment name, task prior, ...).
    pub extra: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    optimizer: AdamWConfig,
    step: u64,
    rng: BTreeMap<String, RngState>,
    #[serde(default)]
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            optimizer: self.optimizer,
            step: self.step,
            rng: self.rng.clone(),
            extra: self.extra.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape.clone() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        writeln!(out, "{}", json.len())?;
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rest = bytes;
        let mut line = || -> Result<&str> {
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
            let s = std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))?;
            rest = &rest[end + 1..];
            Ok(s)
        };
        if line()? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len: usize = line()?.trim().parse().map_err(|_| bad("bad header length"))?;
        if rest.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..len])?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let mut blob = &rest[len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if blob.len() < 4 * n {
                return Err(bad(format!("truncated data for tensor {}", entry.name)));
            }
            let data = blob[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blob = &blob[4 * n..];
            tensors.push((entry.name, Tensor::new(&entry.shape, data)));
        }
        if !blob.is_empty() {
            return Err(bad(format!("{} trailing bytes", blob.len())));
        }
        Ok(Self {
            model: header.model,
            optimizer: header.optimizer,
            step: header.step,
            rng: header.rng,
            extra: header.extra,
            tensors,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::File { path: path.display().to_string(), message: m },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn sample() -> Checkpoint {
        let mut rng = BTreeMap::new();
        let mut r = RngStream::new(3, 9);
        r.uniform();
        rng.insert("data".to_string(), r.state());
        Checkpoint {
            model: ModelConfig::desk(3, 4),
            optimizer: AdamWConfig::default(),
            step: 17,
            rng,
            extra: serde_json::json!({"experiment": "x"}),
            tensors: vec![
                ("a".into(), Tensor::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-20])),
                ("b".into(), Tensor::new(&[1], vec![7.0])),
            ],
        }
    }

    #[test]
    fn byte_round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        let bits: Vec<u32> = back.tensors[0].1.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits[1], (-0.0f32).to_bits());
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"hello\n3\n{}").is_err());
    }
}
