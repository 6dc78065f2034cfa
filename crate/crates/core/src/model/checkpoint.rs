//! Binary checkpoint format:
//!
//! ```text
//! "SNDC" | u32 LE version | u64 LE header length | JSON header | f64 LE payload
//! ```
//!
//! The header holds the model configuration, one descriptor per tensor
//! (name, shape, byte offset into the payload) and training metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, SNeurodCnn, PARAM_NAMES};
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SNDC";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMetadata {
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SNeurodCnn,
    pub metadata: TrainingMetadata,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDescriptor {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorDescriptor>,
    metadata: TrainingMetadata,
}

pub fn encode_checkpoint(model: &SNeurodCnn, metadata: &TrainingMetadata) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let tensors = PARAM_NAMES
        .iter()
        .zip(model.parameters())
        .map(|(name, t)| {
            let d = TensorDescriptor { name: name.to_string(), shape: t.shape().to_vec(), offset };
            offset += 8 * t.len() as u64;
            d
        })
        .collect();
    let header = Header { config: model.config().clone(), tensors, metadata: metadata.clone() };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(format!("cannot encode checkpoint header: {e}")))?;

    let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.parameters() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, CheckpointError> {
    let found = bytes.len() as u64;
    let magic_len = bytes.len().min(MAGIC.len());
    if bytes[..magic_len] != MAGIC[..magic_len] {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::Truncated { needed: PREAMBLE as u64, found });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = (PREAMBLE as u64).saturating_add(header_len);
    if header_end > found {
        return Err(CheckpointError::Truncated { needed: header_end, found });
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end as usize])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let expected = SNeurodCnn::parameter_shapes(&header.config).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.tensors.len() != expected.len() {
        return Err(CheckpointError::Header(format!(
            "expected {} tensors, header lists {}",
            expected.len(),
            header.tensors.len()
        )));
    }

    let mut offset = 0u64;
    for ((desc, shape), name) in header.tensors.iter().zip(&expected).zip(PARAM_NAMES) {
        if desc.name != name {
            return Err(CheckpointError::Header(format!("expected tensor {name}, found {}", desc.name)));
        }
        let declared: usize = desc.shape.iter().product();
        let wanted: usize = shape.iter().product();
        if desc.shape != *shape || declared != wanted {
            return Err(CheckpointError::SizeMismatch {
                name: desc.name.clone(),
                reason: format!(
                    "header shape {:?} ({declared} values) disagrees with configuration {shape:?} ({wanted} values)",
                    desc.shape
                ),
            });
        }
        if desc.offset != offset {
            return Err(CheckpointError::SizeMismatch {
                name: desc.name.clone(),
                reason: format!("offset {} but preceding tensors end at {offset}", desc.offset),
            });
        }
        offset += 8 * wanted as u64;
    }

    let payload = &bytes[header_end as usize..];
    let needed = header_end + offset;
    if (payload.len() as u64) < offset {
        return Err(CheckpointError::Truncated { needed, found });
    }
    if payload.len() as u64 > offset {
        return Err(CheckpointError::SizeMismatch {
            name: "<payload>".into(),
            reason: format!("{} trailing bytes after the last tensor", payload.len() as u64 - offset),
        });
    }

    let mut tensors = Vec::with_capacity(expected.len());
    let mut chunks = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for shape in &expected {
        let n = shape.iter().product();
        let data: Vec<f64> = chunks.by_ref().take(n).collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Header(e.to_string()))?;
        tensors.push(t);
    }
    let model =
        SNeurodCnn::from_parameters(header.config, tensors).map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok(Checkpoint { model, metadata: header.metadata })
}

pub fn save_checkpoint(model: &SNeurodCnn, metadata: &TrainingMetadata, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, metadata)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?)
}
