//! Checkpoint container.
//!
//! Layout: the 8-byte magic `AMDCKPT1`, a little-endian `u64` header length,
//! the UTF-8 JSON header, then each tensor's little-endian `f64` payload in
//! manifest order. Every manifest entry carries its byte offset (relative to
//! the start of the payload section) and a SHA-256 of its payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::ParamSet;
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 8] = b"AMDCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Teacher,
    Student,
    /// Alignment projections and generators, trained alongside the student.
    Auxiliary,
    AdamM,
    AdamV,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub group: TensorGroup,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: CheckpointKind,
    pub step: u64,
    pub config: serde_json::Value,
    /// Content hash of the teacher a student was distilled from.
    pub teacher_hash: Option<String>,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub step: u64,
    pub config: serde_json::Value,
    pub teacher_hash: Option<String>,
    pub groups: BTreeMap<TensorGroup, ParamSet>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn group(&self, group: TensorGroup) -> Result<&ParamSet> {
        self.groups
            .get(&group)
            .ok_or_else(|| Error::CorruptHeader(format!("checkpoint has no {group:?} tensors")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        for (group, params) in &self.groups {
            for (name, t) in params.iter() {
                let bytes = t.to_le_bytes();
                entries.push(ManifestEntry {
                    name: name.to_string(),
                    group: *group,
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                    offset: payload.len() as u64,
                    nbytes: bytes.len() as u64,
                    sha256: sha256_hex(&bytes),
                });
                payload.extend_from_slice(&bytes);
            }
        }
        let header = Header {
            kind: self.kind,
            step: self.step,
            config: self.config.clone(),
            teacher_hash: self.teacher_hash.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::CorruptHeader("missing AMDCKPT1 magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let end = 16u64
            .checked_add(len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::CorruptHeader(format!("header length {len} runs past the end of the file")))?
            as usize;
        let header: Header =
            serde_json::from_slice(&bytes[16..end]).map_err(|e| Error::CorruptHeader(e.to_string()))?;
        let payload = &bytes[end..];
        let expected = header.tensors.iter().map(|e| e.offset + e.nbytes).max().unwrap_or(0);
        if (payload.len() as u64) < expected {
            return Err(Error::Truncated {
                expected,
                found: payload.len() as u64,
            });
        }
        let mut groups: BTreeMap<TensorGroup, ParamSet> = BTreeMap::new();
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            if e.dtype != "f64" || e.nbytes != 8 * numel as u64 {
                return Err(Error::CorruptHeader(format!("manifest entry for `{}` is inconsistent", e.name)));
            }
            let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
            if sha256_hex(raw) != e.sha256 {
                return Err(Error::HashMismatch(e.name.clone()));
            }
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| Error::CorruptHeader(err.to_string()))?;
            groups.entry(e.group).or_default().insert(e.name.clone(), t);
        }
        Ok(Checkpoint {
            kind: header.kind,
            step: header.step,
            config: header.config,
            teacher_hash: header.teacher_hash,
            groups,
        })
    }

    /// Write via a temporary sibling file so an interrupted save never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
