//! Checkpoint container.
//!
//! Layout: the 8-byte magic `RLENSCKP`, a little-endian `u64` header
//! length, the JSON header ([`Header`]), then every parameter as
//! little-endian `f32` values in manifest order with no padding.

use std::fs;
use std::io::Read;
use std::path::Path;

use lens_core::model::{ModelConfig, VlTransformer};
use lens_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::FORMAT_VERSION;

pub const MAGIC: &[u8; 8] = b"RLENSCKP";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset of the first value, in `f32` elements from the data start.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    /// Free-form provenance (stage, seed, epoch, data fingerprint).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn to_bytes(model: &VlTransformer, meta: serde_json::Value) -> Vec<u8> {
    let store = model.params();
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (name, t) in store.names().iter().zip(store.tensors()) {
        params.push(ParamEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
        offset += t.len();
    }
    let header = Header { format_version: FORMAT_VERSION, config: model.config().clone(), params, meta };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in store.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(VlTransformer, Header)> {
    let bad = |m: &str| Error::format(path, m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a reasoning-lens checkpoint"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::format(path, e))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {}", header.format_version)));
    }
    let data = &bytes[body..];
    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if data.len() != 4 * total {
        return Err(bad(&format!("expected {} parameter bytes, found {}", 4 * total, data.len())));
    }
    let mut names = Vec::with_capacity(header.params.len());
    let mut tensors = Vec::with_capacity(header.params.len());
    let mut expect = 0;
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        if p.offset != expect {
            return Err(bad(&format!("parameter `{}` at offset {} where {expect} expected", p.name, p.offset)));
        }
        let values = data[4 * p.offset..4 * (p.offset + n)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        names.push(p.name.clone());
        tensors.push(Tensor::new(&p.shape, values)?);
        expect += n;
    }
    let model = VlTransformer::from_params(header.config.clone(), &names, tensors)?;
    Ok((model, header))
}

pub fn save(path: &Path, model: &VlTransformer, meta: serde_json::Value) -> Result<()> {
    crate::io::write_atomic(path, &to_bytes(model, meta))
}

pub fn load(path: &Path) -> Result<(VlTransformer, Header)> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(Error::io(path))?;
    from_bytes(&bytes, path)
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
