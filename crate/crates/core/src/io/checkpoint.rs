//! Parameter archive.
//!
//! Layout, all little-endian: `b"STCK"`, `u16` version (1), `u32` record
//! count, then per record a `u32` name length, the UTF-8 name and an embedded
//! tensor file; finally a `u32` length and a JSON trailer.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stan_tensor::Tensor;

use super::{read_bytes, tensor_file, write_atomic};
use crate::config::ModelConfig;
use crate::params::ParamStore;
use crate::{Result, StanError};

pub const MAGIC: &[u8; 4] = b"STCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, model: &ModelConfig, seed: u64) -> Self {
        Self {
            tensors: store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            meta: CheckpointMeta {
                config_hash: model.hash(),
                seed,
                model: model.clone(),
            },
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(self.tensors.len())?.to_le_bytes());
        let mut seen = HashSet::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(StanError::Data(format!("duplicate tensor name {name}")));
            }
            out.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&tensor_file::encode(t)?);
        }
        let trailer = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&len_u32(trailer.len())?.to_le_bytes());
        out.extend_from_slice(&trailer);
        Ok(out)
    }

    pub fn decode(bytes: &[u8], what: &str) -> Result<Self> {
        let bad = |reason: String| StanError::format(what, reason);
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("header truncated".into()))? != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.u16().ok_or_else(|| bad("header truncated".into()))?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = r.u32().ok_or_else(|| bad("header truncated".into()))? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for i in 0..count {
            let len = r.u32().ok_or_else(|| bad(format!("record {i} truncated")))? as usize;
            let name = r.take(len).ok_or_else(|| bad(format!("record {i} name truncated")))?;
            let name = std::str::from_utf8(name)
                .map_err(|_| bad(format!("record {i} name is not UTF-8")))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(bad(format!("duplicate tensor name {name}")));
            }
            let (t, used) = tensor_file::decode_prefix(&bytes[r.pos..], &format!("{what}:{name}"))?;
            r.pos += used;
            tensors.push((name, t));
        }
        let len = r.u32().ok_or_else(|| bad("trailer truncated".into()))? as usize;
        let trailer = r.take(len).ok_or_else(|| bad("trailer truncated".into()))?;
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let meta = serde_json::from_slice(trailer).map_err(|e| bad(format!("trailer: {e}")))?;
        Ok(Self { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_bytes(path)?, &path.display().to_string())
    }

    /// Copies every tensor into `store`, which must have been built from a
    /// configuration with the same hash and hold exactly the same names and
    /// shapes.
    pub fn restore_into(&self, store: &mut ParamStore<f32>, model: &ModelConfig) -> Result<()> {
        let hash = model.hash();
        if hash != self.meta.config_hash {
            return Err(StanError::CheckpointMismatch(format!(
                "config hash {} differs from checkpoint hash {}",
                hash, self.meta.config_hash
            )));
        }
        if self.tensors.len() != store.len() {
            return Err(StanError::CheckpointMismatch(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store
                .find(name)
                .ok_or_else(|| StanError::CheckpointMismatch(format!("unexpected tensor {name}")))?;
            if store.get(id).shape() != t.shape() {
                return Err(StanError::CheckpointMismatch(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| StanError::Data(format!("length {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}
