//! Binary checkpoint: magic, big-endian version and manifest length, a JSON
//! manifest, then every parameter as little-endian f32 in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamStore;
use crate::pipeline::NormStats;
use crate::tensor::{numel, Element, Tensor};

use super::ModelConfig;

pub const MAGIC: &[u8; 8] = b"RAMITCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O error: {0}")]
    Io(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("parameter shapes differ: {}", .0.join(", "))]
    ShapeMismatch(Vec<String>),
    #[error("checkpoint has parameters the model lacks: {}", .0.join(", "))]
    UnknownParameter(Vec<String>),
    #[error("checkpoint is missing parameters: {}", .0.join(", "))]
    MissingParameter(Vec<String>),
}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(default)]
    pub config: Option<ModelConfig>,
    #[serde(default)]
    pub norm: Option<NormStats>,
    pub params: Vec<ParamRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_store<T: Element>(ps: &ParamStore<T>, config: Option<&ModelConfig>, norm: Option<&NormStats>) -> Self {
        let mut offset = 0;
        let mut params = Vec::with_capacity(ps.len());
        let mut tensors = Vec::with_capacity(ps.len());
        for (_, p) in ps.iter() {
            params.push(ParamRecord {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                offset,
            });
            offset += 4 * p.tensor.numel();
            tensors.push(p.tensor.cast::<f32>());
        }
        Self {
            manifest: Manifest {
                version: VERSION,
                config: config.cloned(),
                norm: norm.cloned(),
                params,
            },
            tensors,
        }
    }

    /// Copies every tensor into `ps`, which must hold exactly the same names and shapes.
    pub fn apply<T: Element>(&self, ps: &mut ParamStore<T>) -> Result<(), CheckpointError> {
        let mut unknown = Vec::new();
        let mut mismatched = Vec::new();
        let mut hits = Vec::new();
        for (rec, t) in self.manifest.params.iter().zip(&self.tensors) {
            match ps.id(&rec.name) {
                None => unknown.push(rec.name.clone()),
                Some(id) if ps.get(id).shape() != t.shape() => mismatched.push(format!(
                    "{} (checkpoint {:?}, model {:?})",
                    rec.name,
                    t.shape(),
                    ps.get(id).shape()
                )),
                Some(id) => hits.push((id, t)),
            }
        }
        if !mismatched.is_empty() {
            return Err(CheckpointError::ShapeMismatch(mismatched));
        }
        if !unknown.is_empty() {
            return Err(CheckpointError::UnknownParameter(unknown));
        }
        if hits.len() != ps.len() {
            let present: std::collections::HashSet<&str> = self.manifest.params.iter().map(|r| r.name.as_str()).collect();
            let missing = ps
                .iter()
                .filter(|(_, p)| !present.contains(p.name.as_str()))
                .map(|(_, p)| p.name.clone())
                .collect();
            return Err(CheckpointError::MissingParameter(missing));
        }
        for (id, t) in hits {
            ps.set(id, t.cast());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let blob: usize = self.tensors.iter().map(|t| 4 * t.numel()).sum();
        let mut out = Vec::with_capacity(20 + manifest.len() + blob);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_be_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_be_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 {
            return Err(CheckpointError::Io(format!("file too short for header ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = u32::from_be_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let mlen = u64::from_be_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let start = 20usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| CheckpointError::Io(format!("manifest of {mlen} bytes truncated")))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[20..start]).map_err(|e| CheckpointError::Format(format!("manifest: {e}")))?;
        let blob = &bytes[start..];
        let mut expected = 0;
        let mut tensors = Vec::with_capacity(manifest.params.len());
        for rec in &manifest.params {
            if rec.offset != expected {
                return Err(CheckpointError::Format(format!(
                    "record {} at offset {} but expected {expected}",
                    rec.name, rec.offset
                )));
            }
            let n = numel(&rec.shape);
            let end = rec.offset + 4 * n;
            if end > blob.len() {
                return Err(CheckpointError::Io(format!(
                    "record {} incomplete: needs bytes {}..{end} of a {}-byte blob",
                    rec.name,
                    rec.offset,
                    blob.len()
                )));
            }
            let data = blob[rec.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(rec.shape.clone(), data).map_err(|e| CheckpointError::Format(e.to_string()))?);
            expected = end;
        }
        if expected != blob.len() {
            return Err(CheckpointError::Format(format!(
                "{} trailing bytes after the last record",
                blob.len() - expected
            )));
        }
        Ok(Self { manifest, tensors })
    }
}

/// Writes through a temporary file in the destination directory, then renames.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    crate::pipeline::write_atomic(path, &ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}
