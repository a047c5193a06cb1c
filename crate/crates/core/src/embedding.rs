//! Precomputed text, label and prompted-image embeddings.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::dataset::{CandidateId, ImageId, RefId};
use crate::error::{Error, Result};
use crate::jsonl;

/// Little-endian `f32` bytes, base64 encoded.
pub fn encode_f32s(values: impl IntoIterator<Item = f32>) -> String {
    let bytes: Vec<u8> = values.into_iter().flat_map(f32::to_le_bytes).collect();
    B64.encode(bytes)
}

pub fn decode_f32s(text: &str) -> Result<Vec<f32>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::InvalidValue(format!("base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::InvalidValue(format!(
            "{} bytes is not a whole number of f32 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EmbeddingKey {
    /// Referring expression, keyed by reference.
    Text(RefId),
    /// Dataset class label.
    Label(String),
    /// Image prompted with one candidate mask.
    PromptedImage {
        image_id: ImageId,
        candidate_id: CandidateId,
    },
}

#[derive(Serialize, Deserialize)]
struct PromptedKey {
    image_id: ImageId,
    candidate_id: CandidateId,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FloatData {
    Base64(String),
    Plain(Vec<f32>),
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRecord {
    kind: String,
    key: serde_json::Value,
    dim: usize,
    data: FloatData,
}

impl EmbeddingRecord {
    fn into_entry(self) -> Result<(EmbeddingKey, Vec<f32>)> {
        let key = match self.kind.as_str() {
            "text" | "label" => {
                let s = self
                    .key
                    .as_str()
                    .ok_or_else(|| Error::InvalidValue(format!("{} key must be a string", self.kind)))?
                    .to_string();
                if self.kind == "text" {
                    EmbeddingKey::Text(s)
                } else {
                    EmbeddingKey::Label(s)
                }
            }
            "prompted_image" => {
                let k: PromptedKey = serde_json::from_value(self.key)?;
                EmbeddingKey::PromptedImage {
                    image_id: k.image_id,
                    candidate_id: k.candidate_id,
                }
            }
            other => return Err(Error::InvalidValue(format!("unknown embedding kind {other:?}"))),
        };
        let values = match self.data {
            FloatData::Base64(s) => decode_f32s(&s)?,
            FloatData::Plain(v) => v,
        };
        if values.len() != self.dim {
            return Err(Error::InvalidValue(format!(
                "declared dim {} but {} values",
                self.dim,
                values.len()
            )));
        }
        Ok((key, values))
    }

    fn from_entry(key: &EmbeddingKey, values: &[f32]) -> Self {
        let (kind, key) = match key {
            EmbeddingKey::Text(r) => ("text", serde_json::Value::from(r.as_str())),
            EmbeddingKey::Label(l) => ("label", serde_json::Value::from(l.as_str())),
            EmbeddingKey::PromptedImage {
                image_id,
                candidate_id,
            } => (
                "prompted_image",
                serde_json::to_value(PromptedKey {
                    image_id: image_id.clone(),
                    candidate_id: candidate_id.clone(),
                })
                .expect("plain struct"),
            ),
        };
        EmbeddingRecord {
            kind: kind.into(),
            key,
            dim: values.len(),
            data: FloatData::Base64(encode_f32s(values.iter().copied())),
        }
    }
}

/// Embedding vectors of one shared dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    dim: Option<usize>,
    entries: BTreeMap<EmbeddingKey, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: EmbeddingKey, values: Vec<f32>) -> Result<()> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite component at {i} for {key:?}"
            )));
        }
        match self.dim {
            Some(d) if d != values.len() => {
                return Err(Error::InvalidValue(format!(
                    "dimension {} for {key:?}, table dimension is {d}",
                    values.len()
                )));
            }
            None => self.dim = Some(values.len()),
            _ => {}
        }
        if self.entries.insert(key.clone(), values).is_some() {
            return Err(Error::InvalidValue(format!("duplicate embedding {key:?}")));
        }
        Ok(())
    }

    pub fn get(&self, key: &EmbeddingKey) -> Option<&[f32]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EmbeddingKey, &[f32])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// All label embeddings, keyed by label.
    pub fn labels(&self) -> BTreeMap<&str, &[f32]> {
        self.entries
            .iter()
            .filter_map(|(k, v)| match k {
                EmbeddingKey::Label(l) => Some((l.as_str(), v.as_slice())),
                _ => None,
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut table = Self::new();
        for l in jsonl::read_path::<EmbeddingRecord>(path, jsonl::EMBEDDINGS)? {
            let wrap = |e: Error| Error::Validation {
                path: path.display().to_string(),
                line: l.line,
                message: e.to_string(),
            };
            let (key, values) = l.record.into_entry().map_err(wrap)?;
            table.insert(key, values).map_err(wrap)?;
        }
        Ok(table)
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        jsonl::write(
            out,
            jsonl::EMBEDDINGS,
            self.entries
                .iter()
                .map(|(k, v)| EmbeddingRecord::from_entry(k, v)),
        )
    }
}
