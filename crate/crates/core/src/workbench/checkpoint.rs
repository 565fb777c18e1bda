//! Binary checkpoint format.
//!
//! ```text
//! "ONES" | version: u32 LE | meta_len: u64 LE | meta: UTF-8 JSON | payload
//! ```
//!
//! The payload holds every tensor listed in `meta.tensors`, in that order,
//! as row-major little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::gather::GatherConfig;
use crate::model::{ClassifierModel, ModelArch, TensorInfo};

pub const MAGIC: [u8; 4] = *b"ONES";
pub const FORMAT_VERSION: u32 = 1;

/// Where a checkpoint came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `teacher`, `dense`, `student-init`, `student`, ...
    pub role: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gather: Option<GatherConfig>,
    /// SHA-256 of the teacher checkpoint this model was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_sha256: Option<String>,
    /// Training configuration, stored verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ModelArch,
    pub tensors: Vec<TensorInfo>,
    pub provenance: Provenance,
}

impl CheckpointMeta {
    pub fn for_model(model: &ClassifierModel, provenance: Provenance) -> Self {
        CheckpointMeta {
            arch: model.arch(),
            tensors: model.tensor_layout(),
            provenance,
        }
    }
}

fn element_count(info: &TensorInfo) -> u64 {
    info.shape.iter().map(|&d| d as u64).product()
}

pub fn encode_checkpoint(model: &ClassifierModel, provenance: Provenance) -> Result<Vec<u8>> {
    let meta = CheckpointMeta::for_model(model, provenance);
    let json = serde_json::to_vec(&meta)?;
    let payload: u64 = meta.tensors.iter().map(element_count).sum::<u64>() * 8;
    let mut out = Vec::with_capacity(16 + json.len() + payload as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: usize, n: u64, section: &'static str) -> Result<&'a [u8]> {
    let available = bytes.len().saturating_sub(at) as u64;
    if available < n {
        return Err(CheckpointError::Truncated {
            section,
            expected: n,
            found: available,
        }
        .into());
    }
    Ok(&bytes[at..at + n as usize])
}

/// Parse a checkpoint. Nothing is returned unless every check passes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ClassifierModel, CheckpointMeta)> {
    let magic = take(bytes, 0, 4, "magic")?;
    if magic != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(magic);
        return Err(CheckpointError::BadMagic { found }.into());
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        }
        .into());
    }
    let meta_len = u64::from_le_bytes(take(bytes, 8, 8, "metadata length")?.try_into().unwrap());
    let meta_bytes = take(bytes, 16, meta_len, "metadata")?;
    let meta: CheckpointMeta =
        serde_json::from_slice(meta_bytes).map_err(|e| CheckpointError::Metadata(e.to_string()))?;

    let mut model = ClassifierModel::zeros(&meta.arch)
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
    if model.tensor_layout() != meta.tensors {
        return Err(CheckpointError::Inconsistent(
            "declared tensors do not match the declared architecture".into(),
        )
        .into());
    }
    let start = 16 + meta_len as usize;
    let payload_len: u64 = meta.tensors.iter().map(element_count).sum::<u64>() * 8;
    let payload = take(bytes, start, payload_len, "tensor payload")?;
    let extra = (bytes.len() - start) as u64 - payload_len;
    if extra != 0 {
        return Err(CheckpointError::TrailingBytes(extra).into());
    }
    let mut chunks = payload.chunks_exact(8);
    for t in model.tensors_mut() {
        for (v, c) in t.iter_mut().zip(&mut chunks) {
            *v = f64::from_le_bytes(c.try_into().unwrap());
        }
    }
    if model
        .tensors()
        .iter()
        .any(|t| t.iter().any(|v| !v.is_finite()))
    {
        return Err(CheckpointError::Inconsistent("payload holds non-finite values".into()).into());
    }
    Ok((model, meta))
}

pub fn save_checkpoint(model: &ClassifierModel, provenance: Provenance, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, provenance)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ClassifierModel, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
