//! Single-file checkpoint for a trained enhancer and its auxiliary classifier.
//!
//! Layout: u64 LE header length, UTF-8 JSON header, then every tensor as f64 LE
//! in canonical order. The header carries the tensor table and an FNV-1a
//! checksum of the blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{fnv1a64_hex, get_f64s, put_f64s};
use crate::enhancer::{Enhancer, EnhancerConfig};
use crate::error::{PmceError, Result};
use crate::trainer::TrainableModel;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub enhancer: EnhancerConfig,
    pub num_classes: usize,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    pub blob_fnv1a: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EnhancerConfig,
    pub seed: u64,
    pub model: TrainableModel,
}

impl Checkpoint {
    pub fn enhancer(&self) -> Result<Enhancer> {
        Enhancer::new(self.config, self.model.enhancer.clone())
    }
}

pub fn checkpoint_bytes(
    config: &EnhancerConfig,
    seed: u64,
    model: &TrainableModel,
) -> Result<Vec<u8>> {
    if !model.enhancer.matches(config) {
        return Err(PmceError::DimensionMismatch(format!(
            "model dims {:?} do not match config {config:?}",
            model.enhancer.dims()
        )));
    }
    let mut blob = Vec::new();
    put_f64s(&mut blob, &model.flatten());
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        enhancer: *config,
        num_classes: model.classifier.num_classes(),
        seed,
        tensors: model
            .tensors()
            .into_iter()
            .map(|(name, t)| TensorEntry { name, len: t.len() })
            .collect(),
        blob_fnv1a: fnv1a64_hex(&blob),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    config: &EnhancerConfig,
    seed: u64,
    model: &TrainableModel,
) -> Result<()> {
    let bytes = checkpoint_bytes(config, seed, model)?;
    std::fs::write(path, bytes).map_err(|e| PmceError::io(path, e))
}

pub fn parse_checkpoint(bytes: &[u8], file: &str) -> Result<Checkpoint> {
    let truncated = |expected: u64| PmceError::Truncated {
        file: file.to_string(),
        expected,
        actual: bytes.len() as u64,
    };
    if bytes.len() < 8 {
        return Err(truncated(8));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let header_end = 8u64.saturating_add(header_len);
    if (bytes.len() as u64) < header_end {
        return Err(truncated(header_end));
    }
    let header_end = header_end as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| PmceError::Json {
            path: file.into(),
            source: e,
        })?;
    if header.version != CHECKPOINT_VERSION {
        return Err(PmceError::UnknownVersion {
            found: header.version,
            supported: CHECKPOINT_VERSION,
        });
    }
    header.enhancer.validate()?;
    let mut model = TrainableModel::zeros(&header.enhancer, header.num_classes);
    let expected: Vec<TensorEntry> = model
        .tensors()
        .into_iter()
        .map(|(name, t)| TensorEntry { name, len: t.len() })
        .collect();
    if expected != header.tensors {
        return Err(PmceError::DimensionMismatch(format!(
            "{file}: tensor table does not match the declared configuration"
        )));
    }
    let blob_len: usize = expected.iter().map(|t| t.len * 8).sum();
    let total = (header_end + blob_len) as u64;
    if bytes.len() as u64 != total {
        return Err(truncated(total));
    }
    let blob = &bytes[header_end..];
    let actual = fnv1a64_hex(blob);
    if actual != header.blob_fnv1a {
        return Err(PmceError::ChecksumMismatch {
            file: file.to_string(),
            expected: header.blob_fnv1a,
            actual,
        });
    }
    let flat = get_f64s(blob);
    if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
        return Err(PmceError::NonFinite {
            context: format!("{file} parameter"),
            index: i,
        });
    }
    model.load_flat(&flat)?;
    Ok(Checkpoint {
        config: header.enhancer,
        seed: header.seed,
        model,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| PmceError::io(path, e))?;
    parse_checkpoint(&bytes, &path.display().to_string())
}
