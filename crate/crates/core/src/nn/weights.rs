//! CXRW weight container.
//!
//! Layout: magic `CXRW`, one version byte, a little-endian `u32` header
//! length, the UTF-8 JSON header, then the little-endian `f32` blob. Tensor
//! offsets and lengths count elements, not bytes.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NnError;

pub const CXRW_MAGIC: &[u8; 4] = b"CXRW";
pub const CXRW_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::shape("weight", format!("shape {:?} needs {} values, got {}", shape, n, data.len())));
        }
        Ok(Self { shape, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    pub architecture: String,
    pub class_labels: Vec<String>,
    tensors: IndexMap<String, WeightTensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: String,
    class_labels: Vec<String>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

impl WeightStore {
    pub fn new(architecture: &str, class_labels: Vec<String>) -> Self {
        Self { architecture: architecture.to_string(), class_labels, tensors: IndexMap::new() }
    }

    /// Inserts or replaces a tensor, keeping first-insertion order.
    pub fn insert(&mut self, name: impl Into<String>, t: WeightTensor) -> Option<WeightTensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn remove(&mut self, name: &str) -> Option<WeightTensor> {
        self.tensors.shift_remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &WeightTensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Sum of all stored tensor sizes.
    pub fn total_elements(&self) -> u64 {
        self.tensors.values().map(|t| t.data.len() as u64).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry { name: name.clone(), shape: t.shape.clone(), offset, len: t.data.len() });
            offset += t.data.len();
        }
        let header = Header {
            architecture: self.architecture.clone(),
            class_labels: self.class_labels.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(9 + json.len() + offset * 4);
        out.extend_from_slice(CXRW_MAGIC);
        out.push(CXRW_VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        if bytes.len() < 9 || &bytes[..4] != CXRW_MAGIC {
            return Err(NnError::Format("missing CXRW magic".into()));
        }
        if bytes[4] != CXRW_VERSION {
            return Err(NnError::Format(format!("unsupported version {}", bytes[4])));
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(9..9 + hlen).ok_or_else(|| NnError::Integrity("header runs past end of file".into()))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| NnError::Format(format!("header is not valid JSON: {e}")))?;
        let blob = &bytes[9 + hlen..];
        if blob.len() % 4 != 0 {
            return Err(NnError::Integrity(format!("blob length {} is not a multiple of 4", blob.len())));
        }
        let n_elems = blob.len() / 4;

        let mut spans: Vec<(usize, usize)> = Vec::with_capacity(header.tensors.len());
        let mut store = WeightStore::new(&header.architecture, header.class_labels);
        for e in header.tensors {
            let expect: usize = e.shape.iter().product();
            if expect != e.len {
                return Err(NnError::Integrity(format!(
                    "tensor `{}` declares len {} but shape {:?}",
                    e.name, e.len, e.shape
                )));
            }
            let end = e.offset.checked_add(e.len).filter(|&end| end <= n_elems).ok_or_else(|| {
                NnError::Integrity(format!("tensor `{}` extends past the blob ({} elements)", e.name, n_elems))
            })?;
            let data: Vec<f32> = blob[e.offset * 4..end * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(NnError::Integrity(format!("tensor `{}` has a non-finite value at {}", e.name, i)));
            }
            spans.push((e.offset, end));
            if store.insert(e.name.clone(), WeightTensor { shape: e.shape, data }).is_some() {
                return Err(NnError::Integrity(format!("duplicate tensor `{}`", e.name)));
            }
        }
        spans.sort_unstable();
        let mut cursor = 0;
        for (start, end) in spans {
            if start != cursor {
                return Err(NnError::Integrity(format!("blob has a gap or overlap at element {cursor}")));
            }
            cursor = end;
        }
        if cursor != n_elems {
            return Err(NnError::Integrity(format!("{} trailing blob elements", n_elems - cursor)));
        }
        Ok(store)
    }
}

pub fn save_weights(store: &WeightStore, path: &Path) -> Result<(), NnError> {
    std::fs::write(path, store.to_bytes())?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<WeightStore, NnError> {
    WeightStore::from_bytes(&std::fs::read(path)?)
}

/// Hex SHA-256 of raw file bytes.
pub fn weight_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
