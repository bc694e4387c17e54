//! Synthetic datasets whose visual and textual modalities share a latent
//! concept per class, so that class-name similarity predicts visual proximity.
//!
//! ```text
//! c_j ~ N(0, I_{d_s})                      latent concept of class j
//! mu_j = A c_j                             visual class mean   (A: d_v x d_s, orthonormal columns)
//! s_j  = B c_j + sigma_name * eps          class-name embedding (B: d_t x d_s, orthonormal columns)
//! x    = mu_y + sigma_vis * eta            instance visual feature
//! cap  = s_y + C (x - mu_y) + sigma_cap * eps   instance caption embedding
//! ```
//!
//! `C` is a fixed `d_t x d_v` Gaussian matrix scaled by `0.3 / sqrt(d_v)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PmceError, Result};
use crate::feature_store::{DatasetSplit, FeatureRecord, SplitName};
use crate::knowledge_bank::KnowledgeBank;
use crate::linalg::{self, dot, Matrix};
use crate::prior::{self, PriorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_base: usize,
    pub n_novel: usize,
    pub per_class: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub d_s: usize,
    pub sigma_vis: f64,
    pub sigma_name: f64,
    pub sigma_cap: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_base: 30,
            n_novel: 10,
            per_class: 60,
            d_v: 32,
            d_t: 16,
            d_s: 8,
            // Baseline 5-way 1-shot accuracy lands near 0.64 at this noise level.
            sigma_vis: 0.8,
            sigma_name: 0.1,
            sigma_cap: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_base,
            self.n_novel,
            self.per_class,
            self.d_v,
            self.d_t,
            self.d_s,
        ];
        if counts.contains(&0) {
            return Err(PmceError::InvalidConfig(format!(
                "synthetic sizes must be positive: {self:?}"
            )));
        }
        if self.d_s > self.d_v.min(self.d_t) {
            return Err(PmceError::InvalidConfig(format!(
                "d_s = {} exceeds min(d_v, d_t) = {}",
                self.d_s,
                self.d_v.min(self.d_t)
            )));
        }
        let sigmas = [self.sigma_vis, self.sigma_name, self.sigma_cap];
        if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(PmceError::InvalidConfig(
                "noise scales must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Generated splits plus the noise-free class means they were drawn around.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub base: DatasetSplit,
    pub novel: DatasetSplit,
    pub base_means: Matrix,
    pub novel_means: Matrix,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// `rows x cols` matrix with orthonormal columns (modified Gram-Schmidt on Gaussian draws).
pub fn orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    assert!(cols <= rows);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v = gaussian(rng, rows, 1.0);
        for b in &basis {
            let proj = dot(&v, b);
            linalg::axpy(-proj, b, &mut v);
        }
        let n = linalg::norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    Matrix::from_rows(&basis).transpose()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<(DatasetSplit, DatasetSplit)> {
    generate_with_truth(cfg).map(|d| (d.base, d.novel))
}

pub fn generate_with_truth(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let visual_mix = orthonormal_columns(&mut rng, cfg.d_v, cfg.d_s);
    let text_mix = orthonormal_columns(&mut rng, cfg.d_t, cfg.d_s);
    let caption_mix = Matrix::from_vec(
        cfg.d_t,
        cfg.d_v,
        gaussian(&mut rng, cfg.d_t * cfg.d_v, 0.3 / (cfg.d_v as f64).sqrt()),
    );

    let total = cfg.n_base + cfg.n_novel;
    let mut means = Matrix::zeros(total, cfg.d_v);
    let mut names = Matrix::zeros(total, cfg.d_t);
    for j in 0..total {
        let concept = gaussian(&mut rng, cfg.d_s, 1.0);
        means
            .row_mut(j)
            .copy_from_slice(&visual_mix.mul_vec(&concept));
        let mut s = text_mix.mul_vec(&concept);
        linalg::axpy(1.0, &gaussian(&mut rng, cfg.d_t, cfg.sigma_name), &mut s);
        names.row_mut(j).copy_from_slice(&s);
    }

    let mut make_split = |split_name: SplitName, classes: std::ops::Range<usize>| {
        let first = classes.start;
        let mut records = Vec::with_capacity(classes.len() * cfg.per_class);
        for j in classes.clone() {
            for _ in 0..cfg.per_class {
                let noise = gaussian(&mut rng, cfg.d_v, cfg.sigma_vis);
                let mut visual = means.row(j).to_vec();
                linalg::axpy(1.0, &noise, &mut visual);
                let mut caption = names.row(j).to_vec();
                linalg::axpy(1.0, &caption_mix.mul_vec(&noise), &mut caption);
                linalg::axpy(
                    1.0,
                    &gaussian(&mut rng, cfg.d_t, cfg.sigma_cap),
                    &mut caption,
                );
                records.push(FeatureRecord {
                    class_id: (j - first) as u32,
                    visual: to_f32(&visual),
                    caption_emb: to_f32(&caption),
                });
            }
        }
        DatasetSplit {
            split_name,
            class_names: classes.clone().map(|j| format!("class_{j}")).collect(),
            name_embs: classes.map(|j| to_f32(names.row(j))).collect(),
            records,
        }
    };
    let base = make_split(SplitName::Base, 0..cfg.n_base);
    let novel = make_split(SplitName::Novel, cfg.n_base..total);

    let pick = |range: std::ops::Range<usize>| {
        Matrix::from_rows(&range.map(|j| means.row(j).to_vec()).collect::<Vec<_>>())
    };
    Ok(SyntheticData {
        base,
        novel,
        base_means: pick(0..cfg.n_base),
        novel_means: pick(cfg.n_base..total),
    })
}

/// Empirical comparison of the retrieved prior against a single noisy sample
/// as estimates of each novel class's true mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorDiagnostic {
    /// Mean over novel classes of `||mu_prior - mu_true||`.
    pub prior_distance: f64,
    /// Mean over novel records of `||x - mu_true||`.
    pub sample_distance: f64,
}

pub fn prior_diagnostic(
    data: &SyntheticData,
    bank: &KnowledgeBank,
    cfg: &PriorConfig,
) -> Result<PriorDiagnostic> {
    cfg.validate(bank.len())?;
    let novel = &data.novel;
    let mut prior_total = 0.0;
    for c in 0..novel.num_classes() {
        let name = linalg::widen(&novel.name_embs[c]);
        let scores = prior::cosine_scores(&name, bank)?;
        let nbrs = prior::top_k(&scores, cfg.k)?;
        let sel: Vec<f64> = nbrs.iter().map(|&j| scores[j]).collect();
        let w = prior::prior_weights(&sel, cfg.tau)?;
        let mu = prior::prior_mean(bank, &nbrs, &w)?;
        prior_total += linalg::sq_dist(&mu, data.novel_means.row(c)).sqrt();
    }
    let sample_total: f64 = novel
        .records
        .iter()
        .map(|r| {
            linalg::sq_dist(
                &linalg::widen(&r.visual),
                data.novel_means.row(r.class_id as usize),
            )
            .sqrt()
        })
        .sum();
    Ok(PriorDiagnostic {
        prior_distance: prior_total / novel.num_classes() as f64,
        sample_distance: sample_total / novel.records.len() as f64,
    })
}
