//! Binary checkpoints.
//!
//! Layout: the magic bytes `MDST`, a little-endian `u16` version, a
//! little-endian `u32` header length, a UTF-8 JSON header, then every tensor
//! as contiguous little-endian `f64` values. The header maps each tensor name
//! to `{"shape": [...], "offset": bytes}` (offsets relative to the start of
//! the data section) and carries the model configuration under
//! `"__metadata__"`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderParams, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MDST";
pub const VERSION: u16 = 1;
const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    offset: usize,
}

/// Serializes an encoder to checkpoint bytes.
pub fn to_bytes(params: &EncoderParams) -> Result<Vec<u8>> {
    let mut header = serde_json::Map::new();
    header.insert(METADATA_KEY.into(), serde_json::to_value(params.config)?);
    let mut data = Vec::new();
    let mut order = Vec::new();
    for (_, name, t) in params.store.iter() {
        let entry = Entry { shape: t.shape().to_vec(), offset: data.len() };
        header.insert(name.to_string(), serde_json::to_value(entry)?);
        order.push(name.to_string());
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Format("checkpoint header exceeds u32".into()))?;
    let mut out = Vec::with_capacity(10 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Parses checkpoint bytes, validating tensor names and shapes against the
/// stored configuration.
pub fn from_bytes(bytes: &[u8]) -> Result<EncoderParams> {
    let fail = |msg: &str| Error::Format(format!("checkpoint: {msg}"));
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(fail("missing MDST magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(fail("truncated header"));
    }
    let mut header: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&bytes[10..data_start])?;
    let meta = header.remove(METADATA_KEY).ok_or_else(|| fail("missing model metadata"))?;
    let config: ModelConfig = serde_json::from_value(meta)?;
    let data = &bytes[data_start..];
    let mut store = ParamStore::new();
    let mut covered = 0;
    for (name, shape) in config.layout() {
        let value = header
            .remove(&name)
            .ok_or_else(|| fail(&format!("missing tensor {name}")))?;
        let entry: Entry = serde_json::from_value(value)?;
        if entry.shape != shape {
            return Err(fail(&format!("tensor {name} has shape {:?}, expected {shape:?}", entry.shape)));
        }
        let n: usize = shape.iter().product();
        let end = entry.offset + 8 * n;
        if !entry.offset.is_multiple_of(8) || end > data.len() {
            return Err(fail(&format!("tensor {name} lies outside the data section")));
        }
        covered += 8 * n;
        let values = data[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        store.add(name, Tensor::new(shape, values)?);
    }
    if let Some(extra) = header.keys().next() {
        return Err(fail(&format!("unexpected tensor {extra}")));
    }
    if covered != data.len() {
        return Err(fail(&format!("data section holds {} bytes, tensors cover {covered}", data.len())));
    }
    EncoderParams::from_store(config, store)
}

pub fn save(params: &EncoderParams, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<EncoderParams> {
    from_bytes(&fs::read(path)?)
}
