//! Per-base-class visual means paired with class-name embeddings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, fnv1a64_hex};
use crate::error::{PmceError, Result};
use crate::feature_store::DatasetSplit;
use crate::linalg::Matrix;

pub const BANK_VERSION: u32 = 1;
pub const BANK_JSON: &str = "bank.json";
pub const BANK_MEANS: &str = "bank.means";
pub const BANK_NAMES: &str = "bank.names_emb";

/// Rows are stored at `f32` precision so the on-disk form is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBank {
    class_names: Vec<String>,
    means: Matrix,
    name_embs: Matrix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankManifest {
    pub version: u32,
    pub num_classes: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub class_names: Vec<String>,
    pub means_fnv1a: String,
    pub names_emb_fnv1a: String,
}

fn round_f32(m: Matrix) -> Matrix {
    let (r, c) = m.shape();
    Matrix::from_vec(
        r,
        c,
        m.into_vec()
            .into_iter()
            .map(|v| f64::from(v as f32))
            .collect(),
    )
}

impl KnowledgeBank {
    /// Values are rounded to `f32`.
    pub fn new(class_names: Vec<String>, means: Matrix, name_embs: Matrix) -> Result<Self> {
        if means.rows() != class_names.len() || name_embs.rows() != class_names.len() {
            return Err(PmceError::DimensionMismatch(format!(
                "bank has {} names, {} means, {} name embeddings",
                class_names.len(),
                means.rows(),
                name_embs.rows()
            )));
        }
        for (what, m) in [("bank.means", &means), ("bank.names_emb", &name_embs)] {
            if let Some(bad) = m.iter_rows().position(|r| r.iter().any(|v| !v.is_finite())) {
                return Err(PmceError::NonFinite {
                    context: what.into(),
                    index: bad,
                });
            }
        }
        Ok(Self {
            class_names,
            means: round_f32(means),
            name_embs: round_f32(name_embs),
        })
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn d_v(&self) -> usize {
        self.means.cols()
    }

    pub fn d_t(&self) -> usize {
        self.name_embs.cols()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn name_embs(&self) -> &Matrix {
        &self.name_embs
    }

    pub fn mean(&self, j: usize) -> &[f64] {
        self.means.row(j)
    }

    pub fn name_emb(&self, j: usize) -> &[f64] {
        self.name_embs.row(j)
    }
}

/// Averages each base class's visual features (accumulated in `f64`).
pub fn build_bank(base: &DatasetSplit) -> Result<KnowledgeBank> {
    let (d_v, d_t) = (base.d_v(), base.d_t());
    if base.records.is_empty() || base.num_classes() == 0 {
        return Err(PmceError::InsufficientData("base split is empty".into()));
    }
    let mut sums = Matrix::zeros(base.num_classes(), d_v);
    let mut counts = vec![0usize; base.num_classes()];
    for (i, r) in base.records.iter().enumerate() {
        let c = r.class_id as usize;
        if c >= counts.len() {
            return Err(PmceError::IndexOutOfRange {
                context: format!("base record {i} class_id"),
                index: c,
                len: counts.len(),
            });
        }
        counts[c] += 1;
        for (acc, v) in sums.row_mut(c).iter_mut().zip(&r.visual) {
            *acc += f64::from(*v);
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(PmceError::EmptyClass {
                class_id: c,
                name: base.class_names[c].clone(),
            });
        }
        sums.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
    }
    let names = Matrix::from_vec(
        base.num_classes(),
        d_t,
        base.name_embs
            .iter()
            .flat_map(|r| r.iter().map(|&v| f64::from(v)))
            .collect(),
    );
    KnowledgeBank::new(base.class_names.clone(), sums, names)
}

fn to_f32_bytes(m: &Matrix) -> Vec<u8> {
    let vals: Vec<f32> = m.as_slice().iter().map(|&v| v as f32).collect();
    let mut out = Vec::with_capacity(vals.len() * 4);
    codec::put_f32s(&mut out, &vals);
    out
}

pub fn save_bank(bank: &KnowledgeBank, path: &Path) -> Result<BankManifest> {
    fs::create_dir_all(path).map_err(|e| PmceError::io(path, e))?;
    let means = to_f32_bytes(&bank.means);
    let names = to_f32_bytes(&bank.name_embs);
    codec::write_file(&path.join(BANK_MEANS), &means)?;
    codec::write_file(&path.join(BANK_NAMES), &names)?;
    let manifest = BankManifest {
        version: BANK_VERSION,
        num_classes: bank.len(),
        d_v: bank.d_v(),
        d_t: bank.d_t(),
        class_names: bank.class_names.clone(),
        means_fnv1a: fnv1a64_hex(&means),
        names_emb_fnv1a: fnv1a64_hex(&names),
    };
    codec::write_json(&path.join(BANK_JSON), &manifest)?;
    Ok(manifest)
}

pub fn load_bank(path: &Path) -> Result<KnowledgeBank> {
    let manifest: BankManifest = codec::read_json(&path.join(BANK_JSON))?;
    if manifest.version != BANK_VERSION {
        return Err(PmceError::UnknownVersion {
            found: manifest.version,
            supported: BANK_VERSION,
        });
    }
    let n = manifest.num_classes;
    let means = codec::read_verified(
        &path.join(BANK_MEANS),
        4 * (n * manifest.d_v) as u64,
        &manifest.means_fnv1a,
    )?;
    let names = codec::read_verified(
        &path.join(BANK_NAMES),
        4 * (n * manifest.d_t) as u64,
        &manifest.names_emb_fnv1a,
    )?;
    let widen = |b: &[u8]| codec::get_f32s(b).into_iter().map(f64::from).collect();
    KnowledgeBank::new(
        manifest.class_names,
        Matrix::from_vec(n, manifest.d_v, widen(&means)),
        Matrix::from_vec(n, manifest.d_t, widen(&names)),
    )
}
