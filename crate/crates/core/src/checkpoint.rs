//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DPLCCKPT" | u32 version | u64 header length | JSON header
//!            | f64 payload | 32-byte SHA-256 of everything before it
//! ```
//!
//! The payload holds, per entry, the parameters, the normalization
//! buffers, and the optimizer moments in header order, so values round-trip
//! bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::models::{ArchSpec, Model, Role};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DPLCCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// One model and (optionally) its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub model: Model,
    pub optimizer: Option<AdamState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
    /// Fingerprint of the configuration that produced the run.
    pub config_fingerprint: String,
    pub iteration: u64,
    pub seed: u64,
    /// Free-form run facts (code rate, λ used, generator fingerprint, ...).
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    role: Role,
    arch: ArchSpec,
    training: bool,
    params: Vec<Vec<usize>>,
    buffers: Vec<Vec<usize>>,
    optimizer_step: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config_fingerprint: String,
    iteration: u64,
    seed: u64,
    metadata: serde_json::Value,
    entries: Vec<EntryHeader>,
}

impl Checkpoint {
    pub fn single(model: Model) -> Self {
        Self {
            entries: vec![CheckpointEntry { model, optimizer: None }],
            config_fingerprint: String::new(),
            iteration: 0,
            seed: 0,
            metadata: serde_json::Value::Null,
        }
    }

    pub fn entry(&self, role: Role) -> Result<&CheckpointEntry> {
        self.entries.iter().find(|e| e.model.role() == role).ok_or_else(|| Error::RoleMismatch {
            expected: role.name().into(),
            found: self
                .entries
                .iter()
                .map(|e| e.model.role().name())
                .collect::<Vec<_>>()
                .join(", "),
        })
    }

    pub fn model(&self, role: Role) -> Result<Model> {
        Ok(self.entry(role)?.model.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload: Vec<&Tensor> = Vec::new();
        let entries = self
            .entries
            .iter()
            .map(|e| {
                payload.extend(e.model.params());
                payload.extend(e.model.buffers());
                if let Some(opt) = &e.optimizer {
                    payload.extend(&opt.m);
                    payload.extend(&opt.v);
                }
                EntryHeader {
                    role: e.model.role(),
                    arch: e.model.arch().clone(),
                    training: e.model.is_training(),
                    params: e.model.params().iter().map(|t| t.shape().to_vec()).collect(),
                    buffers: e.model.buffers().iter().map(|t| t.shape().to_vec()).collect(),
                    optimizer_step: e.optimizer.as_ref().map(|o| o.t),
                }
            })
            .collect();
        let header = Header {
            config_fingerprint: self.config_fingerprint.clone(),
            iteration: self.iteration,
            seed: self.seed,
            metadata: self.metadata.clone(),
            entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(64 + json.len() + 8 * payload.iter().map(|t| t.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in payload {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&body[20..hend]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut values = body[hend..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        if (body.len() - hend) % 8 != 0 {
            return Err(corrupt("payload is not a whole number of values"));
        }
        let mut take = |shape: &Vec<usize>| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.len() != n {
                return Err(corrupt("truncated payload"));
            }
            Ok(Tensor::new(shape.clone(), data))
        };
        let mut entries = Vec::with_capacity(header.entries.len());
        for e in &header.entries {
            let params = e.params.iter().map(&mut take).collect::<Result<Vec<_>>>()?;
            let buffers = e.buffers.iter().map(&mut take).collect::<Result<Vec<_>>>()?;
            let optimizer = match e.optimizer_step {
                Some(t) => {
                    let m = e.params.iter().map(&mut take).collect::<Result<Vec<_>>>()?;
                    let v = e.params.iter().map(&mut take).collect::<Result<Vec<_>>>()?;
                    Some(AdamState { m, v, t })
                }
                None => None,
            };
            let model = Model::from_parts(e.role, e.arch.clone(), params, buffers, e.training)
                .map_err(|err| Error::Checkpoint(format!("entry {}: {err}", e.role)))?;
            entries.push(CheckpointEntry { model, optimizer });
        }
        if values.next().is_some() {
            return Err(corrupt("trailing payload"));
        }
        Ok(Self {
            entries,
            config_fingerprint: header.config_fingerprint,
            iteration: header.iteration,
            seed: header.seed,
            metadata: header.metadata,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, ckpt.to_bytes()).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads the entry with `role`, failing with a role mismatch otherwise.
pub fn load_model(path: &Path, role: Role) -> Result<Model> {
    load_checkpoint(path)?.model(role)
}
