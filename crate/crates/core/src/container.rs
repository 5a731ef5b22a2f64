//! JSON header + named little-endian f32 blobs in one file.
//!
//! ```text
//! magic (4) | version u32 | header length u64 | header JSON | blob bytes
//! ```
//!
//! The header carries a `blobs` array of `{name, len}` entries giving the
//! order and element count of the f32 blocks that follow.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fieldio::write_atomic;

const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Envelope {
    meta: Value,
    blobs: Vec<BlobEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct Blobs {
    order: Vec<String>,
    data: HashMap<String, Vec<f64>>,
}

impl Blobs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) {
        let name = name.into();
        self.order.push(name.clone());
        self.data.insert(name, values);
    }

    pub fn take(&mut self, name: &str) -> Result<Vec<f64>> {
        self.data.remove(name).ok_or_else(|| Error::Missing(format!("blob `{name}`")))
    }
}

pub fn encode(magic: &[u8; 4], meta: &Value, blobs: &Blobs) -> Result<Vec<u8>> {
    let env = Envelope {
        meta: meta.clone(),
        blobs: blobs.order.iter().map(|n| BlobEntry { name: n.clone(), len: blobs.data[n].len() }).collect(),
    };
    let header = serde_json::to_vec(&env)?;
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for n in &blobs.order {
        for v in &blobs.data[n] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(magic: &[u8; 4], bytes: &[u8], origin: &str) -> Result<(Value, Blobs)> {
    let corrupt = |reason: &str| Error::CorruptFile { path: origin.to_string(), reason: reason.to_string() };
    if bytes.len() < 16 || &bytes[0..4] != magic {
        return Err(corrupt("bad magic or truncated header"));
    }
    if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != VERSION {
        return Err(corrupt("unsupported version"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| corrupt("header length exceeds file"))?;
    let env: Envelope = serde_json::from_slice(body).map_err(|e| corrupt(&e.to_string()))?;
    let mut offset = 16 + hlen;
    let total: usize = env.blobs.iter().map(|b| b.len).sum();
    if bytes.len() != offset + 4 * total {
        return Err(corrupt("blob payload length mismatch"));
    }
    let mut blobs = Blobs::new();
    for b in env.blobs {
        let vals = bytes[offset..offset + 4 * b.len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        offset += 4 * b.len;
        blobs.push(b.name, vals);
    }
    Ok((env.meta, blobs))
}

pub fn write(path: &Path, magic: &[u8; 4], meta: &Value, blobs: &Blobs) -> Result<()> {
    write_atomic(path, &encode(magic, meta, blobs)?)
}

pub fn read(path: &Path, magic: &[u8; 4]) -> Result<(Value, Blobs)> {
    let bytes = fs::read(path)?;
    decode(magic, &bytes, &path.display().to_string())
}
