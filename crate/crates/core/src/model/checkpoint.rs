//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! b"ORGC" | version: u32 | header_len: u64 | header (UTF-8 JSON) | f32 payload
//! ```
//!
//! The header maps each parameter name to `{"shape", "offset", "dtype": "f32"}`
//! where `offset` is the byte offset into the payload. The reserved key
//! `__metadata__` carries the model config. Keys are written in sorted order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ModelConfig, ModelParameters};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ORGC";
pub const CHECKPOINT_VERSION: u32 = 1;
const METADATA_KEY: &str = "__metadata__";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    shape: Vec<usize>,
    offset: usize,
    dtype: String,
}

pub fn write_checkpoint_bytes<T: Real>(config: &ModelConfig, params: &ModelParameters<T>) -> Result<Vec<u8>> {
    let mut header = BTreeMap::new();
    let mut payload = Vec::with_capacity(params.numel() * 4);
    for (name, t) in params.iter() {
        let entry = Entry {
            shape: t.shape().to_vec(),
            offset: payload.len(),
            dtype: "f32".into(),
        };
        header.insert(name.clone(), serde_json::to_value(entry)?);
        for &x in t.data() {
            payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    header.insert(METADATA_KEY.to_string(), serde_json::json!({ "model_config": config }));
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<(ModelConfig, ModelParameters<f32>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing ORGC magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < header_len {
        return Err(bad("truncated header"));
    }
    let mut header: BTreeMap<String, Value> = serde_json::from_slice(&body[..header_len])?;
    let payload = &body[header_len..];
    let meta = header.remove(METADATA_KEY).ok_or_else(|| bad("missing __metadata__"))?;
    let config: ModelConfig = serde_json::from_value(meta.get("model_config").cloned().ok_or_else(|| bad("missing model_config"))?)?;
    let mut tensors = BTreeMap::new();
    for (name, v) in header {
        let e: Entry = serde_json::from_value(v)?;
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!("parameter `{name}` has unsupported dtype {}", e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("parameter `{name}` runs past the payload")));
        }
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(e.shape, data)?);
    }
    let params = ModelParameters::from_map(&config, tensors)?;
    Ok((config, params))
}

/// Writes through a temporary file and a rename, so an interrupted write never
/// leaves a truncated checkpoint at `path`.
pub fn save_checkpoint<T: Real>(path: &Path, config: &ModelConfig, params: &ModelParameters<T>) -> Result<()> {
    let bytes = write_checkpoint_bytes(config, params)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParameters<f32>)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    read_checkpoint_bytes(&std::fs::read(path)?)
}
