//! Binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! "VQAD0001"                 8-byte magic
//! header_len: u64 LE         length of the JSON header in bytes
//! header: UTF-8 JSON         {"config": ModelConfig, "tensors": [{"name", "shape", "offset"}]}
//! payload                    little-endian f32 tensors in directory order
//! ```
//!
//! `offset` is the byte offset of a tensor from the start of the payload.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VqadError};
use crate::model::{ModelConfig, ModelState};

pub const MAGIC: &[u8; 8] = b"VQAD0001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &ModelState) -> Vec<u8> {
    let mut offset = 0u64;
    let tensors = model
        .tensor_specs()
        .into_iter()
        .map(|spec| {
            let entry = TensorEntry {
                offset,
                name: spec.name,
                shape: spec.shape,
            };
            offset += 4 * entry.shape.iter().product::<usize>() as u64;
            entry
        })
        .collect();
    let header = CheckpointHeader {
        config: model.config().clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<ModelState> {
    let bad = |reason: &str| VqadError::corrupt(origin, reason);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing VQAD0001 magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file size"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| bad(&format!("bad header: {e}")))?;
    header.config.validate().map_err(|e| bad(&e.to_string()))?;

    let payload = &bytes[header_end..];
    let expected = ModelState::new(header.config.clone())?.tensor_specs();
    if expected.len() != header.tensors.len() {
        return Err(bad("tensor directory does not match the configured architecture"));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for (spec, entry) in expected.iter().zip(&header.tensors) {
        if spec.name != entry.name || spec.shape != entry.shape {
            return Err(bad(&format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
        }
        let start = entry.offset as usize;
        let end = start + 4 * spec.numel();
        let raw = payload
            .get(start..end)
            .ok_or_else(|| bad(&format!("tensor {} truncated", entry.name)))?;
        tensors.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<_>>(),
        );
    }
    ModelState::from_tensors(header.config, tensors).map_err(|e| bad(&e.to_string()))
}

pub fn save(model: &ModelState, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| VqadError::io(path, e))?;
    file.write_all(&to_bytes(model)).map_err(|e| VqadError::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| VqadError::io(path, e))?;
    from_bytes(&bytes, path)
}
