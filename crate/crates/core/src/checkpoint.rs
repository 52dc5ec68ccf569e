//! Single-file weight archives.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "ECHOTRK\0"
//! version  u32      FORMAT_VERSION
//! meta     u32 length + UTF-8 JSON object
//! count    u32      number of tensors
//! tensor   u16 name length + UTF-8 name, u8 rank, rank × u64 dims,
//!          product(dims) × f64
//! ```
//!
//! Tensors appear in name order. Decoding validates every length against the
//! remaining input before allocating, so truncated or hostile files fail with
//! [`Error::Malformed`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::{Tracker, ModelConfig};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"ECHOTRK\0";
pub const FORMAT_VERSION: u32 = 1;
const MAX_RANK: usize = 8;
const MAX_NAME: usize = 1024;

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let values: usize = self.tensors.values().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(32 + meta.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(meta.len(), "metadata")?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&len_u32(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            if name.is_empty() || name.len() > MAX_NAME {
                return Err(Error::invalid(format!("tensor name of {} bytes", name.len())));
            }
            if t.rank() > MAX_RANK {
                return Err(Error::invalid(format!("tensor {name} has rank {}", t.rank())));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata: serde_json::Value = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| bad(format!("metadata: {e}")))?;
        if !metadata.is_object() {
            return Err(bad("metadata must be a JSON object"));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            if name_len == 0 || name_len > MAX_NAME {
                return Err(bad(format!("tensor name of {name_len} bytes")));
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_owned();
            let rank = r.u8()? as usize;
            if rank > MAX_RANK {
                return Err(bad(format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut len: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?).map_err(|_| bad("dimension overflows usize"))?;
                len = len.checked_mul(d).ok_or_else(|| bad("tensor size overflows"))?;
                shape.push(d);
            }
            let nbytes = len.checked_mul(8).ok_or_else(|| bad("tensor size overflows"))?;
            let raw = r.take(nbytes)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if tensors.insert(name.clone(), Tensor::new(&shape, data)).is_some() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn bad(reason: impl Into<String>) -> Error {
    Error::malformed("checkpoint", reason)
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("{what} too large for the archive format")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Metadata of a model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Training progress, present on checkpoints written by `fit`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<serde_json::Value>,
}

const PARAM_PREFIX: &str = "param/";

/// Model weights plus optional extra tensor groups (e.g. optimizer moments),
/// stored under `<group>/<name>`.
pub fn save_model(
    path: &Path,
    model: &Tracker,
    training: Option<serde_json::Value>,
    extra: &[(&str, &ParamStore)],
) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.config().clone(),
        training,
    };
    let mut tensors = BTreeMap::new();
    for (k, t) in model.params().iter() {
        tensors.insert(format!("{PARAM_PREFIX}{k}"), t.clone());
    }
    for (group, store) in extra {
        for (k, t) in store.iter() {
            tensors.insert(format!("{group}/{k}"), t.clone());
        }
    }
    Archive {
        metadata: serde_json::to_value(meta)?,
        tensors,
    }
    .save(path)
}

/// A decoded model checkpoint.
pub struct LoadedModel {
    pub model: Tracker,
    pub training: Option<serde_json::Value>,
    pub archive_groups: BTreeMap<String, ParamStore>,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    model_from_archive(Archive::load(path)?)
}

pub fn model_from_archive(archive: Archive) -> Result<LoadedModel> {
    let meta: CheckpointMeta =
        serde_json::from_value(archive.metadata).map_err(|e| bad(format!("metadata: {e}")))?;
    let mut params = ParamStore::new();
    let mut groups: BTreeMap<String, ParamStore> = BTreeMap::new();
    for (k, t) in archive.tensors {
        match k.split_once('/') {
            Some(("param", name)) => params.insert(name, t),
            Some((group, name)) if !name.is_empty() => groups.entry(group.to_owned()).or_default().insert(name, t),
            _ => return Err(bad(format!("tensor {k} has no group prefix"))),
        }
    }
    let model = Tracker::from_parts(meta.model, params)?;
    Ok(LoadedModel {
        model,
        training: meta.training,
        archive_groups: groups,
    })
}
