//! Checkpoint container:
//!
//! ```text
//! "S2SD" | version: u32 LE | header_len: u32 LE | header JSON
//!        | tensor blobs (f32 LE, header order) | crc32: u32 LE
//! ```
//!
//! The checksum covers every byte before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetworkConfig, NetworkError, UNet};
use crate::annotations::ClassScheme;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"S2SD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub best_mean_dice: Option<f64>,
    pub seed: u64,
    /// Square input size the model was trained at.
    pub image_size: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    class_scheme: ClassScheme,
    meta: TrainingMeta,
    tensors: Vec<TensorEntry>,
}

/// Frozen model weights plus everything needed to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub class_scheme: ClassScheme,
    pub meta: TrainingMeta,
    tensors: Vec<(TensorEntry, Vec<f32>)>,
}

impl Checkpoint {
    pub fn capture(model: &UNet, class_scheme: ClassScheme, meta: TrainingMeta) -> Self {
        let tensors = model
            .tensors()
            .into_iter()
            .map(|p| {
                (
                    TensorEntry {
                        name: p.name.clone(),
                        shape: p.shape.clone(),
                    },
                    p.value.clone(),
                )
            })
            .collect();
        Self {
            config: model.config().clone(),
            class_scheme,
            meta,
            tensors,
        }
    }

    pub fn build_model(&self) -> Result<UNet, NetworkError> {
        let mut model = UNet::new(self.config.clone(), 0)?;
        let targets = model.tensors_mut();
        if targets.len() != self.tensors.len() {
            return Err(NetworkError::CorruptCheckpoint(format!(
                "{} tensors stored, model has {}",
                self.tensors.len(),
                targets.len()
            )));
        }
        for (param, (entry, data)) in targets.into_iter().zip(&self.tensors) {
            if param.name != entry.name || param.shape != entry.shape {
                return Err(NetworkError::CorruptCheckpoint(format!(
                    "tensor {} {:?} does not fit {} {:?}",
                    entry.name, entry.shape, param.name, param.shape
                )));
            }
            param.value.copy_from_slice(data);
        }
        Ok(model)
    }

    /// Rejects checkpoints trained for a different class scheme.
    pub fn ensure_scheme(&self, scheme: ClassScheme) -> Result<(), NetworkError> {
        if self.class_scheme != scheme || self.config.num_classes != scheme.num_classes() {
            return Err(NetworkError::ConfigMismatch(format!(
                "checkpoint has {} classes ({}), request needs {} ({})",
                self.config.num_classes,
                self.class_scheme,
                scheme.num_classes(),
                scheme
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            class_scheme: self.class_scheme,
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let blob_len: usize = self.tensors.iter().map(|(_, d)| d.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + header.len() + blob_len);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetworkError> {
        let corrupt = |m: &str| NetworkError::CorruptCheckpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing S2SD header"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(NetworkError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&body[12..header_end])
            .map_err(|e| NetworkError::CorruptCheckpoint(format!("header: {e}")))?;

        let mut blobs = body[header_end..].chunks_exact(4);
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if blobs.len() != expected || !blobs.remainder().is_empty() {
            return Err(corrupt("tensor data length does not match header"));
        }
        let tensors = header
            .tensors
            .into_iter()
            .map(|entry| {
                let n = entry.shape.iter().product();
                let data = blobs
                    .by_ref()
                    .take(n)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect();
                (entry, data)
            })
            .collect();
        Ok(Self {
            config: header.config,
            class_scheme: header.class_scheme,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
