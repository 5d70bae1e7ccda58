//! Binary checkpoint: `RNP1`, a length-prefixed JSON header, named
//! little-endian `f32` arrays with explicit shapes, and a trailing CRC32 of
//! everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RNP1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic(Vec<u8>),
    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("array {name}: config expects shape {expected:?}, file has {got:?}")]
    Shape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

/// JSON header contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub dataset: String,
}

pub fn to_bytes(model: &Model<Tensor<f32>>, meta: &CheckpointMeta) -> Vec<u8> {
    let json = serde_json::to_vec(meta).expect("config serializes");
    let params = model.params();
    let mut out = Vec::with_capacity(64 + json.len() + 4 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| CheckpointError::Format("truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model<Tensor<f32>>, CheckpointMeta), CheckpointError> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    let mut r = Reader { bytes: body, at: 4 };
    let json_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len)?).map_err(|e| CheckpointError::Format(e.to_string()))?;
    let mut model = Model::<Tensor<f32>>::init(&meta.config).map_err(|e| CheckpointError::Format(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut slots = model.params_mut();
    if count != slots.len() {
        return Err(CheckpointError::Format(format!("config implies {} arrays, file has {count}", slots.len())));
    }
    for (name, slot) in slots.iter_mut() {
        let name_len = r.u32()? as usize;
        let got_name = std::str::from_utf8(r.take(name_len)?).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if got_name != name {
            return Err(CheckpointError::Format(format!("expected array {name}, found {got_name}")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if shape != slot.shape() {
            return Err(CheckpointError::Shape { name: name.clone(), expected: slot.shape().to_vec(), got: shape });
        }
        let raw = r.take(4 * slot.len())?;
        for (d, b) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    drop(slots);
    if r.at != body.len() {
        return Err(CheckpointError::Format(format!("{} trailing bytes", body.len() - r.at)));
    }
    Ok((model, meta))
}

pub fn save(path: impl AsRef<Path>, model: &Model<Tensor<f32>>, meta: &CheckpointMeta) -> Result<(), CheckpointError> {
    let p = path.as_ref();
    fs::write(p, to_bytes(model, meta)).map_err(|e| CheckpointError::Io { path: p.display().to_string(), message: e.to_string() })
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model<Tensor<f32>>, CheckpointMeta), CheckpointError> {
    let p = path.as_ref();
    let bytes = fs::read(p).map_err(|e| CheckpointError::Io { path: p.display().to_string(), message: e.to_string() })?;
    from_bytes(&bytes)
}
