//! Binary model checkpoints.
//!
//! ```text
//! "DRIMCKPT"  u32 version
//! u32 len, JSON header (model config plus free-form tags)
//! u32 count, then per parameter:
//!   u32 len, name, u8 trainable, u32 rank, u64 dims..., f64 values...
//! ```
//! Integers and floats are little-endian, so values round-trip bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{DrimError, Result};
use crate::model::{DrimModel, ModelConfig};

const MAGIC: &[u8; 8] = b"DRIMCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    #[serde(default)]
    tags: BTreeMap<String, String>,
}

/// Serialize `model` with optional string tags.
pub fn to_bytes(model: &DrimModel, tags: &BTreeMap<String, String>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        tags: tags.clone(),
    })
    .expect("config serializes");
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(u8::from(p.trainable));
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DrimError::Data("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Rebuild a model from bytes produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<(DrimModel, BTreeMap<String, String>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(DrimError::Data("not a checkpoint file".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(DrimError::Data(format!("unsupported checkpoint version {version}")));
    }
    let len = c.u32()? as usize;
    let header: Header = serde_json::from_slice(c.take(len)?)
        .map_err(|e| DrimError::Data(format!("bad checkpoint header: {e}")))?;
    let mut model = DrimModel::new(header.model, 0)?;
    let count = c.u32()? as usize;
    if count != model.store.len() {
        return Err(DrimError::Data(format!(
            "checkpoint holds {count} parameters, the model has {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| DrimError::Data("parameter name is not UTF-8".into()))?
            .to_string();
        let trainable = c.take(1)?[0] != 0;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel.checked_mul(8).ok_or_else(|| DrimError::Data("bad shape".into()))?)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| DrimError::Data(format!("unknown parameter {name}")))?;
        let p = model.store.get_mut(id);
        if p.value.shape() != shape.as_slice() {
            return Err(DrimError::Data(format!(
                "parameter {name} has shape {shape:?}, expected {:?}",
                p.value.shape()
            )));
        }
        p.value = Array::from_shape_vec(IxDyn(&shape), values).expect("shape checked");
        p.trainable = trainable;
    }
    if c.pos != bytes.len() {
        return Err(DrimError::Data("trailing bytes after checkpoint".into()));
    }
    Ok((model, header.tags))
}

/// Write atomically: a sibling temporary file is renamed into place.
pub fn save(path: &Path, model: &DrimModel, tags: &BTreeMap<String, String>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| DrimError::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
    ));
    let write = || -> io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&to_bytes(model, tags))?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        DrimError::io(path, e)
    })
}

pub fn load(path: &Path) -> Result<(DrimModel, BTreeMap<String, String>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| DrimError::io(path, e))?;
    from_bytes(&bytes)
}
