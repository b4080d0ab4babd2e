//! Checkpoint container.
//!
//! ```text
//! "PMFCKPT1"                  8-byte magic
//! u64 little-endian           manifest length in bytes
//! manifest                    UTF-8 JSON
//! payload                     raw little-endian tensor data
//! ```
//!
//! The manifest holds `format_version`, free-form `configs`, and an ordered
//! tensor table of `{name, dtype, shape, offset, length, requires_grad}` with
//! offsets relative to the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{DType, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PMFCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
    pub requires_grad: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub configs: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(store: &ParamStore, configs: &serde_json::Value) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        let offset = payload.len();
        match t.dtype() {
            DType::F32 => t
                .data()
                .iter()
                .for_each(|&v| payload.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => t
                .data()
                .iter()
                .for_each(|&v| payload.extend_from_slice(&v.to_le_bytes())),
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: t.dtype(),
            shape: t.shape().to_vec(),
            offset,
            length: payload.len() - offset,
            requires_grad: t.requires_grad(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        configs: configs.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value)> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic);
    }
    let len_bytes: [u8; 8] = bytes
        .get(8..16)
        .ok_or_else(|| Error::Checkpoint("truncated manifest length".into()))?
        .try_into()
        .unwrap();
    let mlen = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(mlen))
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json)
        .map_err(|e| Error::Checkpoint(format!("malformed manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(manifest.format_version));
    }
    let payload = &bytes[16 + mlen..];

    let mut store = ParamStore::new();
    let mut end = 0usize;
    for e in &manifest.tensors {
        if e.offset < end {
            return Err(Error::OffsetOverlap(e.name.clone()));
        }
        let numel: usize = e.shape.iter().product();
        let expected = numel * e.dtype.size_of();
        if e.length != expected {
            return Err(Error::LengthMismatch {
                name: e.name.clone(),
                expected,
                actual: e.length,
            });
        }
        let raw = payload
            .get(e.offset..e.offset + e.length)
            .ok_or_else(|| Error::LengthMismatch {
                name: e.name.clone(),
                expected: e.length,
                actual: payload.len().saturating_sub(e.offset),
            })?;
        let data: Vec<f64> = match e.dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let t = Tensor::new(e.shape.clone(), e.dtype, data)?.with_requires_grad(e.requires_grad);
        if store.index_of(&e.name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", e.name)));
        }
        store.insert(e.name.clone(), t);
        end = e.offset + e.length;
    }
    if end != payload.len() {
        return Err(Error::LengthMismatch {
            name: "<payload>".into(),
            expected: end,
            actual: payload.len(),
        });
    }
    Ok((store, manifest.configs))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, configs: &serde_json::Value) -> Result<()> {
    fs::write(path, encode_checkpoint(store, configs)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    decode_checkpoint(&fs::read(path)?)
}
