//! DRWT weights container: `"DRWT"`, version `u32`, header length `u64`, a
//! JSON tensor index, then little-endian `f32` payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DRWT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor payload", n, data.len()));
        }
        Ok(Self { shape, data })
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Index {
    tensors: Vec<IndexEntry>,
}

/// Name → tensor map, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

fn malformed(reason: impl Into<String>) -> Error {
    Error::Malformed {
        format: "DRWT",
        reason: reason.into(),
    }
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// The tensor called `name`, checked against `shape`.
    pub fn require(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name).ok_or_else(|| Error::MissingTensor(name.into()))?;
        if t.shape != shape {
            return Err(Error::TensorShape {
                name: name.into(),
                expected: shape.to_vec(),
                actual: t.shape.clone(),
            });
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = IndexEntry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    dtype: "f32".into(),
                    offset,
                };
                offset += 4 * t.data.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Index { tensors }).expect("index serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::TruncatedHeader);
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let payload_start = usize::try_from(header_len)
            .ok()
            .and_then(|h| h.checked_add(16))
            .filter(|&end| end <= bytes.len())
            .ok_or(Error::TruncatedHeader)?;
        let index: Index =
            serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| malformed(format!("index: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut tensors = BTreeMap::new();
        for e in index.tensors {
            if e.dtype != "f32" {
                return Err(malformed(format!("tensor {:?} has dtype {}", e.name, e.dtype)));
            }
            let count = e
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| malformed(format!("tensor {:?} is too large", e.name)))?;
            let start = usize::try_from(e.offset).map_err(|_| Error::TruncatedData)?;
            let end = count
                .checked_mul(4)
                .and_then(|b| b.checked_add(start))
                .filter(|&end| end <= payload.len())
                .ok_or(Error::TruncatedData)?;
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if tensors.insert(e.name.clone(), Tensor { shape: e.shape, data }).is_some() {
                return Err(malformed(format!("duplicate tensor {:?}", e.name)));
            }
        }
        Ok(Self { tensors })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the serialized container.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightStore {
        let mut w = WeightStore::new();
        w.insert("b", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap());
        w.insert("a", Tensor::new(vec![1], vec![0.25]).unwrap());
        w
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let bytes = sample().to_bytes();
        let back = WeightStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get("b").unwrap().data[5].to_bits(), (-0.0f32).to_bits());
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn require_reports_name_and_shapes() {
        let w = sample();
        match w.require("vgt.shared.wr", &[4, 4]) {
            Err(Error::MissingTensor(n)) => assert_eq!(n, "vgt.shared.wr"),
            other => panic!("{other:?}"),
        }
        match w.require("b", &[3, 2]) {
            Err(Error::TensorShape { expected, actual, .. }) => {
                assert_eq!(expected, vec![3, 2]);
                assert_eq!(actual, vec![2, 3]);
            }
            other => panic!("{other:?}"),
        }
        let msg = w.require("vgt.shared.wr", &[1]).unwrap_err().to_string();
        assert!(msg.contains("vgt.shared.wr"));
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(WeightStore::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(WeightStore::from_bytes(&bad), Err(Error::UnsupportedVersion(9))));
        assert!(matches!(WeightStore::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::TruncatedData)));
        assert!(matches!(WeightStore::from_bytes(&bytes[..10]), Err(Error::TruncatedHeader)));
        let mut bad = bytes.clone();
        bad[8] = 0xff;
        assert!(matches!(WeightStore::from_bytes(&bad), Err(Error::TruncatedHeader)));
    }

    #[test]
    fn hash_tracks_content() {
        let mut w = sample();
        let h = w.hash();
        assert_eq!(h.len(), 64);
        assert_eq!(h, sample().hash());
        w.insert("a", Tensor::new(vec![1], vec![0.5]).unwrap());
        assert_ne!(h, w.hash());
    }
}
