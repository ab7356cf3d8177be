//! Versioned named-tensor checkpoints.
//!
//! Layout: the 8-byte magic `CSICKPT\0`, a little-endian `u64` manifest
//! length, the JSON manifest, then the raw little-endian `f32` payloads at
//! the offsets listed in the manifest (relative to the payload start).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Stage};
use crate::ndgrad::Tensor;
use crate::nn::ParamStore;
use crate::trainer::{EpochRecord, TrainConfig};
use crate::vaecore::Preset;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CSICKPT\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Byte length.
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub preset: Preset,
    pub stage: Stage,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub history: Vec<EpochRecord>,
    pub tensors: Vec<TensorEntry>,
    /// Hex SHA-256 of the payload.
    pub sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub store: ParamStore<f32>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint { path: PathBuf::from(path), reason: reason.into() }
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, train: Option<TrainConfig>, history: Vec<EpochRecord>) -> Self {
        Checkpoint {
            manifest: Manifest {
                version: CHECKPOINT_VERSION,
                preset: model.cfg.preset,
                stage: model.stage,
                model: model.cfg.clone(),
                train,
                history,
                tensors: Vec::new(),
                sha256: String::new(),
            },
            store: model.store.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.store.len());
        for (name, t) in self.store.iter() {
            let offset = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                len: payload.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            tensors,
            sha256: hex(&Sha256::digest(&payload)),
            ..self.manifest.clone()
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt(path, "missing header"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if mlen > body.len() {
            return Err(corrupt(path, format!("manifest length {mlen} exceeds file")));
        }
        let raw: serde_json::Value = serde_json::from_slice(&body[..mlen]).map_err(|e| corrupt(path, format!("manifest: {e}")))?;
        let version = raw.get("version").and_then(|v| v.as_u64()).ok_or_else(|| corrupt(path, "manifest has no version"))?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(Error::VersionMismatch { found: version as u32, expected: CHECKPOINT_VERSION });
        }
        let manifest: Manifest = serde_json::from_value(raw).map_err(|e| corrupt(path, format!("manifest: {e}")))?;
        let payload = &body[mlen..];
        let want: u64 = manifest.tensors.iter().map(|t| t.len).sum();
        if payload.len() as u64 != want {
            return Err(corrupt(path, format!("payload is {} bytes, manifest lists {want}", payload.len())));
        }
        if hex(&Sha256::digest(payload)) != manifest.sha256 {
            return Err(corrupt(path, "payload checksum mismatch"));
        }
        let mut store = ParamStore::new();
        for t in &manifest.tensors {
            if t.dtype != "f32" {
                return Err(corrupt(path, format!("tensor {} has unsupported dtype {}", t.name, t.dtype)));
            }
            let (lo, hi) = (t.offset as usize, (t.offset + t.len) as usize);
            let n: usize = t.shape.iter().product();
            if hi > payload.len() || t.len as usize != n * 4 {
                return Err(corrupt(path, format!("tensor {} extent does not match its shape", t.name)));
            }
            let data = payload[lo..hi].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            store.insert(t.name.clone(), Tensor::new(&t.shape, data)?);
        }
        Ok(Checkpoint { manifest, store })
    }

    /// Model described by the checkpoint's own manifest.
    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_store(self.manifest.model.clone(), self.manifest.stage, self.store.clone())
    }

    /// Loads the weights into the architecture `cfg`, failing with the first
    /// mismatched tensor when they do not fit.
    pub fn model_for(&self, cfg: &ModelConfig) -> Result<Model<f32>> {
        Model::from_store(cfg.clone(), self.manifest.stage, self.store.clone())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests;
