//! Single-file checkpoint:
//!
//! ```text
//! b"RMCK" | u32 LE manifest length | manifest JSON
//! then per tensor: u32 LE name length | name | u64 LE blob length | RMT1 blob
//! ```
//!
//! The manifest holds the [`ModelConfig`], the parameter and buffer names in
//! order, and the config hash.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor_from, write_tensor_to, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RMCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub config_hash: String,
    pub params: Vec<String>,
    pub buffers: Vec<String>,
    /// Free-form extra metadata (for example the training config).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_checkpoint<T: Scalar>(
    model: &Model<T>,
    extra: serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let manifest = CheckpointManifest {
        config: model.cfg.clone(),
        config_hash: model.cfg.hash(),
        params: model.store.params.keys().cloned().collect(),
        buffers: model.store.buffers.keys().cloned().collect(),
        extra,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (name, t) in model.store.params.iter().chain(&model.store.buffers) {
        let mut blob = Vec::new();
        write_tensor_to(t, &mut blob).map_err(|e| Error::io(path, e))?;
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        buf.extend_from_slice(&blob);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::format(self.path, "blob length overflow"))
    }
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(Model<T>, CheckpointManifest)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let n = r.u32()?;
    let manifest: CheckpointManifest = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::format(path, "config hash does not match the stored config"));
    }
    manifest.config.validate()?;
    let mut tensors = IndexMap::new();
    while r.pos < bytes.len() {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let blob_len = r.u64()?;
        let blob = r.take(blob_len)?;
        let t = read_tensor_from(Cursor::new(blob), path)?.into_precision::<T>();
        tensors.insert(name, t);
    }
    let mut store = ParamStore::new();
    for (names, is_param) in [(&manifest.params, true), (&manifest.buffers, false)] {
        for name in names {
            let t = tensors
                .swap_remove(name)
                .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
            if is_param {
                store.insert(name.clone(), t);
            } else {
                store.insert_buffer(name.clone(), t);
            }
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::format(path, format!("unexpected tensor {extra}")));
    }
    let expected = super::init_weights::<T>(&manifest.config, 0)?;
    for (name, t) in &expected.params {
        let got = store.get(name).map_err(|_| Error::format(path, format!("missing {name}")))?;
        if got.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "load_checkpoint",
                lhs: t.shape().to_vec(),
                rhs: got.shape().to_vec(),
            });
        }
    }
    Ok((
        Model {
            cfg: manifest.config.clone(),
            store,
        },
        manifest,
    ))
}
