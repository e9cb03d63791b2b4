//! Flat named-tensor container.
//!
//! Layout: the magic bytes `IVRT`, a little-endian `u64` header length, a
//! JSON header (format tag, tensor names and shapes, free-form metadata),
//! then every tensor's values as little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"IVRT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NamedTensors {
    pub format: String,
    pub tensors: BTreeMap<String, Matrix>,
    pub metadata: serde_json::Value,
}

impl NamedTensors {
    pub fn new(format: impl Into<String>) -> Self {
        Self { format: format.into(), tensors: BTreeMap::new(), metadata: serde_json::Value::Null }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    /// Fetches a tensor and checks its shape.
    pub fn expect(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let m = self.get(name)?;
        if m.shape() != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected ({rows}, {cols})",
                m.shape()
            )));
        }
        Ok(m.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: self.format.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorEntry { name: name.clone(), rows: m.rows(), cols: m.cols() })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + header.len() + 8 * self.tensors.values().map(Matrix::len).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for m in self.tensors.values() {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a named-tensor container"));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut offset = 12 + hlen;
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n = e.rows * e.cols;
            let raw = bytes.get(offset..offset + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            offset += 8 * n;
            tensors.insert(e.name, Matrix::from_vec(e.rows, e.cols, data)?);
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { format: header.format, tensors, metadata: header.metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?)
    }

    pub fn require_format(&self, format: &str) -> Result<()> {
        if self.format != format {
            return Err(Error::Checkpoint(format!("format `{}`, expected `{format}`", self.format)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut t = NamedTensors::new("test_v1");
        t.insert("a", Matrix::from_vec(2, 2, vec![0.1, -2.5e-300, f64::MAX, 1.0 / 3.0]).unwrap());
        t.insert("b", Matrix::zeros(0, 3));
        t.metadata = serde_json::json!({"seed": 7});
        let back = NamedTensors::from_bytes(&t.to_bytes().unwrap()).unwrap();
        assert_eq!(back, t);
        assert!(back.expect("a", 2, 3).is_err());
    }

    #[test]
    fn rejects_garbage() {
        assert!(NamedTensors::from_bytes(b"nope").is_err());
    }
}
