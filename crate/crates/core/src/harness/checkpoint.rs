//! Binary checkpoint layout:
//!
//! ```text
//! b"MMRLCKPT" | manifest length (u64 LE) | SHA-256 of manifest (32 bytes)
//! | manifest (UTF-8 JSON) | payload (f32 LE, row-major, manifest order)
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::EncoderConfig;
use crate::error::{MmrlError, Result};
use crate::numerics::{Parameter, ParameterSet, Tensor};
use crate::objective::Ablations;
use crate::trainer::{hex, ModelState};

pub const MAGIC: &[u8; 8] = b"MMRLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub ablations: Ablations,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

fn sha(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn encode_checkpoint(state: &ModelState<f32>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(state.params.len());
    for p in state.params.iter() {
        payload.extend(p.value.to_f32_le_bytes());
        tensors.push(TensorEntry {
            name: p.name().to_string(),
            trainable: p.trainable(),
            shape: p.value.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: state.config.clone(),
        ablations: state.ablations,
        tensors,
        payload_bytes: payload.len() as u64,
        payload_sha256: hex(&sha(&payload)),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + 8 + 32 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&sha(&json));
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn integrity(msg: impl Into<String>) -> MmrlError {
    MmrlError::Integrity(msg.into())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState<f32>> {
    if bytes.len() < 48 || &bytes[..8] != MAGIC {
        return Err(integrity("missing checkpoint header"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let digest = &bytes[16..48];
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| 48usize.checked_add(l))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| integrity("truncated manifest"))?;
    let json = &bytes[48..end];
    let raw: serde_json::Value = serde_json::from_slice(json).map_err(|e| integrity(format!("manifest: {e}")))?;
    // report a version mismatch ahead of any other manifest problem
    if let Some(found) = raw.get("format_version").and_then(|v| v.as_u64()) {
        if found != FORMAT_VERSION as u64 {
            return Err(MmrlError::Version {
                found: found as u32,
                expected: FORMAT_VERSION,
            });
        }
    }
    if sha(json) != digest {
        return Err(integrity("manifest checksum mismatch"));
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| integrity(format!("manifest: {e}")))?;
    let payload = &bytes[end..];
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(integrity(format!(
            "payload has {} bytes, manifest declares {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    if hex(&sha(payload)) != manifest.payload_sha256 {
        return Err(integrity("payload checksum mismatch"));
    }
    let mut params = ParameterSet::new();
    let mut offset = 0usize;
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let bytes = payload
            .get(offset..offset + 4 * n)
            .ok_or_else(|| integrity(format!("payload too short for `{}`", entry.name)))?;
        offset += 4 * n;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let value = Tensor::new(entry.shape.clone(), data)?;
        params.insert(Parameter::new(entry.name.clone(), value, entry.trainable))?;
    }
    if offset != payload.len() {
        return Err(integrity("payload longer than the declared tensors"));
    }
    manifest.config.validate()?;
    Ok(ModelState {
        config: manifest.config,
        ablations: manifest.ablations,
        params,
    })
}

pub fn save_checkpoint(state: &ModelState<f32>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState<f32>> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Manifest of an encoded checkpoint, without reading tensors.
pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
    if bytes.len() < 48 || &bytes[..8] != MAGIC {
        return Err(integrity("missing checkpoint header"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(48..48 + len).ok_or_else(|| integrity("truncated manifest"))?;
    Ok(serde_json::from_slice(json)?)
}
