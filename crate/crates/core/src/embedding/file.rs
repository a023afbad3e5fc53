//! JSON embeddings file with base64-packed little-endian `f32` vectors.
//!
//! ```json
//! {"dim": 4, "encoder": "clip-vit", "entries": [{"id": "img-0", "vec_b64": "..."}]}
//! ```
//!
//! Each `vec_b64` holds exactly `dim` little-endian `f32` values with no
//! padding. Entry order is preserved on read and write.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{EmbeddingError, EmbeddingVector, Result};

/// The on-disk document, fields exactly as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingsFile {
    pub dim: usize,
    pub encoder: String,
    pub entries: Vec<EmbeddingEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingEntry {
    pub id: String,
    pub vec_b64: String,
}

/// Decoded raw vectors keyed by id, in file order.
///
/// Values are kept exactly as stored so that write-then-read is bit-exact;
/// normalization happens when converting to [`EmbeddingVector`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub encoder: String,
    pub entries: IndexMap<String, Vec<f32>>,
}

pub fn encode_f32_le(values: &[f32]) -> String {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(buf)
}

pub fn decode_f32_le(b64: &str) -> Result<Vec<f32>> {
    let bytes = B64
        .decode(b64)
        .map_err(|e| EmbeddingError::Format(format!("bad base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(EmbeddingError::Format(format!(
            "vector byte length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl EmbeddingTable {
    pub fn new(dim: usize, encoder: impl Into<String>) -> Self {
        Self {
            dim,
            encoder: encoder.into(),
            entries: IndexMap::new(),
        }
    }

    /// Adds or replaces an entry. The vector length must match `dim`.
    pub fn insert(&mut self, id: impl Into<String>, values: Vec<f32>) -> Result<()> {
        if values.len() != self.dim {
            return Err(EmbeddingError::DimMismatch {
                expected: self.dim,
                found: values.len(),
            });
        }
        self.entries.insert(id.into(), values);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_file(&self) -> EmbeddingsFile {
        EmbeddingsFile {
            dim: self.dim,
            encoder: self.encoder.clone(),
            entries: self
                .entries
                .iter()
                .map(|(id, v)| EmbeddingEntry {
                    id: id.clone(),
                    vec_b64: encode_f32_le(v),
                })
                .collect(),
        }
    }

    pub fn from_file(file: EmbeddingsFile) -> Result<Self> {
        if file.dim == 0 {
            return Err(EmbeddingError::Format("dim must be positive".into()));
        }
        let mut seen = HashSet::new();
        let mut decoded = Vec::with_capacity(file.entries.len());
        for entry in file.entries {
            if !seen.insert(entry.id.clone()) {
                return Err(EmbeddingError::DuplicateId(entry.id));
            }
            let values = decode_f32_le(&entry.vec_b64)?;
            decoded.push((entry.id, values));
        }
        // Disagreement among entries is an inconsistency; agreement on the
        // wrong length is a malformed header.
        if let Some((first_id, first)) = decoded.first() {
            if let Some((id, v)) = decoded.iter().find(|(_, v)| v.len() != first.len()) {
                return Err(EmbeddingError::DimInconsistent(format!(
                    "entry `{first_id}` has {} values, entry `{id}` has {}",
                    first.len(),
                    v.len()
                )));
            }
            if first.len() != file.dim {
                return Err(EmbeddingError::Format(format!(
                    "header dim {} but vectors have {} values",
                    file.dim,
                    first.len()
                )));
            }
        }
        Ok(Self {
            dim: file.dim,
            encoder: file.encoder,
            entries: decoded.into_iter().collect(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: EmbeddingsFile =
            serde_json::from_str(&text).map_err(|e| EmbeddingError::Format(format!("{}: {e}", path.display())))?;
        Self::from_file(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_file()).map_err(|e| EmbeddingError::Format(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    /// Normalized vectors keyed by id, in file order.
    pub fn vectors(&self) -> Result<IndexMap<String, EmbeddingVector>> {
        self.entries
            .iter()
            .map(|(id, v)| Ok((id.clone(), EmbeddingVector::from_f32(v)?)))
            .collect()
    }
}

/// Reads an embeddings file and normalizes every vector.
pub fn load_embeddings_file(path: &Path) -> Result<IndexMap<String, EmbeddingVector>> {
    EmbeddingTable::read(path)?.vectors()
}
