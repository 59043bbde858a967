use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Storage precision of the scalar blob.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: Dtype,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    offsets: Vec<usize>,
}

/// Named tensors serialized as a one-line JSON header, a newline, and a
/// little-endian scalar blob. Offsets are relative to the blob start.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t.with_requires_grad(false));
    }

    pub fn extend_prefixed(&mut self, prefix: &str, state: Vec<(String, Tensor)>) {
        for (k, v) in state {
            self.insert(format!("{prefix}{k}"), v);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn entries(&self) -> &BTreeMap<String, Tensor> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let mut offsets = Vec::with_capacity(self.entries.len());
        let mut offset = 0;
        for t in self.entries.values() {
            offsets.push(offset);
            offset += t.numel() * dtype.width();
        }
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dtype,
            names: self.entries.keys().cloned().collect(),
            shapes: self.entries.values().map(|t| t.shape().to_vec()).collect(),
            offsets,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(offset);
        for t in self.entries.values() {
            for v in t.data() {
                match dtype {
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Dtype::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint header is not newline-terminated".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", header.format_version)));
        }
        if header.names.len() != header.shapes.len() || header.names.len() != header.offsets.len() {
            return Err(Error::Format("header arrays differ in length".into()));
        }
        let blob = &bytes[nl + 1..];
        let width = header.dtype.width();
        let mut entries = BTreeMap::new();
        let mut expected_offset = 0;
        for ((name, shape), &off) in header.names.iter().zip(&header.shapes).zip(&header.offsets) {
            if off != expected_offset {
                return Err(Error::Format(format!("`{name}` at offset {off}, expected {expected_offset}")));
            }
            let n: usize = shape.iter().product();
            let end = off + n * width;
            if end > blob.len() {
                return Err(Error::Truncated { offset: nl + 1 + blob.len(), expected: end - blob.len() });
            }
            let data = blob[off..end]
                .chunks_exact(width)
                .map(|c| match header.dtype {
                    Dtype::F64 => f64::from_le_bytes(c.try_into().unwrap()),
                    Dtype::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                })
                .collect();
            entries.insert(name.clone(), Tensor::new(shape.clone(), data)?);
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(Error::Format(format!("{} trailing bytes after blob", blob.len() - expected_offset)));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes(dtype)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("a.weight", Tensor::new(vec![2, 2], vec![1.0, -2.5, 1e-300, 3.0]).unwrap());
        c.insert("b", Tensor::scalar(std::f64::consts::PI));
        c
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes(Dtype::F64);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(Dtype::F64), bytes);
    }

    #[test]
    fn f32_storage_is_stable_after_first_rounding() {
        let bytes = sample().to_bytes(Dtype::F32);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(Dtype::F32), bytes);
        assert_eq!(back.get("b").unwrap().data()[0], std::f64::consts::PI as f32 as f64);
    }

    #[test]
    fn truncated_blob_is_reported() {
        let bytes = sample().to_bytes(Dtype::F64);
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }

    #[test]
    fn header_is_json() {
        let bytes = sample().to_bytes(Dtype::F64);
        let nl = bytes.iter().position(|b| *b == b'\n').unwrap();
        let v: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(v["format_version"], 1);
        assert_eq!(v["dtype"], "f64");
        assert_eq!(v["names"][0], "a.weight");
        assert_eq!(v["offsets"][1], 32);
    }
}
