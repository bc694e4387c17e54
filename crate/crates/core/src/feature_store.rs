//! Directory-based interchange format for precomputed embeddings.
//!
//! A store holds up to three splits (`base`, `validation`, `novel`). Each split
//! is two binary files next to a shared `manifest.json`:
//!
//! * `<split>.records`: per record a little-endian `u32` class id followed by
//!   `d_v` then `d_t` IEEE-754 `f32` values.
//! * `<split>.names`: `num_classes` rows of `d_t` `f32` values in class order.
//!
//! Every binary file is covered by a 64-bit FNV-1a digest stored as hex in the
//! manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{self, fnv1a64_hex};
use crate::error::{PmceError, Result};

pub const STORE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Base,
    Validation,
    Novel,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Base, SplitName::Validation, SplitName::Novel];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Base => "base",
            SplitName::Validation => "validation",
            SplitName::Novel => "novel",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = PmceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(SplitName::Base),
            "validation" => Ok(SplitName::Validation),
            "novel" => Ok(SplitName::Novel),
            other => Err(PmceError::InvalidConfig(format!(
                "unknown split name `{other}`"
            ))),
        }
    }
}

/// One sample: its class, frozen visual feature and caption embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub class_id: u32,
    pub visual: Vec<f32>,
    pub caption_emb: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub split_name: SplitName,
    pub class_names: Vec<String>,
    /// Class-name embeddings, one row of length `d_t` per class.
    pub name_embs: Vec<Vec<f32>>,
    pub records: Vec<FeatureRecord>,
}

impl DatasetSplit {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn d_v(&self) -> usize {
        self.records.first().map_or(0, |r| r.visual.len())
    }

    pub fn d_t(&self) -> usize {
        self.name_embs.first().map_or(0, Vec::len)
    }

    /// Record indices grouped by class id.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes()];
        for (i, r) in self.records.iter().enumerate() {
            if let Some(bucket) = by_class.get_mut(r.class_id as usize) {
                bucket.push(i);
            }
        }
        by_class
    }

    /// Checks every structural invariant against the given dimensions.
    pub fn validate(&self, d_v: usize, d_t: usize) -> Result<()> {
        let split = self.split_name;
        if self.name_embs.len() != self.class_names.len() {
            return Err(PmceError::DimensionMismatch(format!(
                "{split}: {} name embeddings for {} classes",
                self.name_embs.len(),
                self.class_names.len()
            )));
        }
        for (c, row) in self.name_embs.iter().enumerate() {
            if row.len() != d_t {
                return Err(PmceError::DimensionMismatch(format!(
                    "{split}: name embedding {c} has length {}, expected d_t={d_t}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(PmceError::NonFinite {
                    context: format!("{split}.names"),
                    index: c,
                });
            }
        }
        let mut counts = vec![0usize; self.num_classes()];
        for (i, r) in self.records.iter().enumerate() {
            let cid = r.class_id as usize;
            if cid >= counts.len() {
                return Err(PmceError::IndexOutOfRange {
                    context: format!("{split} record {i} class_id"),
                    index: cid,
                    len: counts.len(),
                });
            }
            if r.visual.len() != d_v || r.caption_emb.len() != d_t {
                return Err(PmceError::DimensionMismatch(format!(
                    "{split} record {i}: dims ({}, {}), expected ({d_v}, {d_t})",
                    r.visual.len(),
                    r.caption_emb.len()
                )));
            }
            if r.visual
                .iter()
                .chain(&r.caption_emb)
                .any(|v| !v.is_finite())
            {
                return Err(PmceError::NonFinite {
                    context: format!("{split}.records"),
                    index: i,
                });
            }
            counts[cid] += 1;
        }
        if let Some(empty) = counts.iter().position(|&n| n == 0) {
            return Err(PmceError::EmptyClass {
                class_id: empty,
                name: self.class_names[empty].clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub num_classes: usize,
    pub num_records: usize,
    pub class_names: Vec<String>,
    pub records_fnv1a: String,
    pub names_fnv1a: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub version: u32,
    pub d_v: usize,
    pub d_t: usize,
    pub splits: BTreeMap<SplitName, SplitManifest>,
}

impl StoreManifest {
    /// Exact byte size of one record in `<split>.records`.
    pub fn record_bytes(&self) -> u64 {
        record_bytes(self.d_v, self.d_t)
    }
}

pub fn record_bytes(d_v: usize, d_t: usize) -> u64 {
    4 + 4 * (d_v + d_t) as u64
}

fn encode_records(split: &DatasetSplit) -> Vec<u8> {
    let per = record_bytes(split.d_v(), split.d_t()) as usize;
    let mut out = Vec::with_capacity(per * split.records.len());
    for r in &split.records {
        out.extend_from_slice(&r.class_id.to_le_bytes());
        codec::put_f32s(&mut out, &r.visual);
        codec::put_f32s(&mut out, &r.caption_emb);
    }
    out
}

fn encode_names(split: &DatasetSplit) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * split.num_classes() * split.d_t());
    for row in &split.name_embs {
        codec::put_f32s(&mut out, row);
    }
    out
}

/// Writes `splits` into the directory `path` (created if missing).
pub fn write_store(splits: &[DatasetSplit], path: &Path) -> Result<StoreManifest> {
    let first = splits
        .first()
        .ok_or_else(|| PmceError::InvalidConfig("write_store needs at least one split".into()))?;
    let (d_v, d_t) = (first.d_v(), first.d_t());
    if d_v == 0 || d_t == 0 {
        return Err(PmceError::DimensionMismatch(format!(
            "{}: dims must be positive, got d_v={d_v}, d_t={d_t}",
            first.split_name
        )));
    }
    let mut entries = BTreeMap::new();
    for split in splits {
        if split.d_v() != d_v || split.d_t() != d_t {
            return Err(PmceError::DimensionMismatch(format!(
                "split {} has dims ({}, {}), store uses ({d_v}, {d_t})",
                split.split_name,
                split.d_v(),
                split.d_t()
            )));
        }
        split.validate(d_v, d_t)?;
        if entries.contains_key(&split.split_name) {
            return Err(PmceError::InvalidConfig(format!(
                "split {} given twice",
                split.split_name
            )));
        }
        entries.insert(split.split_name, split);
    }

    fs::create_dir_all(path).map_err(|e| PmceError::io(path, e))?;
    let mut manifest = StoreManifest {
        version: STORE_VERSION,
        d_v,
        d_t,
        splits: BTreeMap::new(),
    };
    for (name, split) in entries {
        let records = encode_records(split);
        let names = encode_names(split);
        codec::write_file(&path.join(format!("{name}.records")), &records)?;
        codec::write_file(&path.join(format!("{name}.names")), &names)?;
        manifest.splits.insert(
            name,
            SplitManifest {
                num_classes: split.num_classes(),
                num_records: split.records.len(),
                class_names: split.class_names.clone(),
                records_fnv1a: fnv1a64_hex(&records),
                names_fnv1a: fnv1a64_hex(&names),
            },
        );
    }
    codec::write_json(&path.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<StoreManifest> {
    let manifest: StoreManifest = codec::read_json(&path.join(MANIFEST_FILE))?;
    if manifest.version != STORE_VERSION {
        return Err(PmceError::UnknownVersion {
            found: manifest.version,
            supported: STORE_VERSION,
        });
    }
    Ok(manifest)
}

/// Reads every split listed in the manifest, verifying sizes and checksums.
pub fn read_store(path: &Path) -> Result<(StoreManifest, Vec<DatasetSplit>)> {
    let manifest = read_manifest(path)?;
    let mut splits = Vec::with_capacity(manifest.splits.len());
    for (&name, entry) in &manifest.splits {
        splits.push(read_split_entry(path, &manifest, name, entry)?);
    }
    Ok((manifest, splits))
}

/// Reads a single split from the store.
pub fn read_split(path: &Path, name: SplitName) -> Result<DatasetSplit> {
    let manifest = read_manifest(path)?;
    let entry = manifest.splits.get(&name).ok_or_else(|| {
        PmceError::InsufficientData(format!("store {} has no `{name}` split", path.display()))
    })?;
    read_split_entry(path, &manifest, name, entry)
}

fn read_split_entry(
    path: &Path,
    manifest: &StoreManifest,
    name: SplitName,
    entry: &SplitManifest,
) -> Result<DatasetSplit> {
    let (d_v, d_t) = (manifest.d_v, manifest.d_t);
    let rec_len = manifest.record_bytes() * entry.num_records as u64;
    let records_bytes = codec::read_verified(
        &path.join(format!("{name}.records")),
        rec_len,
        &entry.records_fnv1a,
    )?;
    let names_len = 4 * (entry.num_classes * d_t) as u64;
    let names_bytes = codec::read_verified(
        &path.join(format!("{name}.names")),
        names_len,
        &entry.names_fnv1a,
    )?;

    let per = manifest.record_bytes() as usize;
    let records = records_bytes
        .chunks_exact(per)
        .map(|chunk| {
            let class_id = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            let floats = codec::get_f32s(&chunk[4..]);
            FeatureRecord {
                class_id,
                visual: floats[..d_v].to_vec(),
                caption_emb: floats[d_v..].to_vec(),
            }
        })
        .collect();
    let name_embs = codec::get_f32s(&names_bytes)
        .chunks_exact(d_t)
        .map(<[f32]>::to_vec)
        .collect();
    if entry.class_names.len() != entry.num_classes {
        return Err(PmceError::DimensionMismatch(format!(
            "{name}: manifest lists {} class names for {} classes",
            entry.class_names.len(),
            entry.num_classes
        )));
    }
    let split = DatasetSplit {
        split_name: name,
        class_names: entry.class_names.clone(),
        name_embs,
        records,
    };
    split.validate(d_v, d_t)?;
    Ok(split)
}
