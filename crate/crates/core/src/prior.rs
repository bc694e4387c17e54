//! Semantics-guided prior retrieval and MAP prototype calibration.
//!
//! A novel class's name embedding is scored against every base-class name
//! embedding in the [`KnowledgeBank`]; the `k` best matches are softmax-weighted
//! at temperature `tau` and their visual means averaged into a prior. The
//! calibrated prototype is the posterior mode under spherical Gaussian
//! uncertainties, which is the convex combination
//! `alpha * p_init + (1 - alpha) * mu_prior`.

use serde::{Deserialize, Serialize};

use crate::error::{PmceError, Result};
use crate::knowledge_bank::KnowledgeBank;
use crate::linalg::{self, dot, norm, Matrix};

pub const DEFAULT_K: usize = 7;
pub const DEFAULT_TAU: f64 = 1.0;
pub const ALPHA_ONE_SHOT: f64 = 0.33;
pub const ALPHA_FEW_SHOT: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRule {
    Fixed(f64),
    FromVariances {
        sigma_prior_sq: f64,
        sigma_like_sq: f64,
    },
}

impl AlphaRule {
    pub fn resolve(self) -> Result<f64> {
        match self {
            AlphaRule::Fixed(a) if (0.0..=1.0).contains(&a) => Ok(a),
            AlphaRule::Fixed(a) => Err(PmceError::InvalidConfig(format!(
                "alpha must lie in [0, 1], got {a}"
            ))),
            AlphaRule::FromVariances {
                sigma_prior_sq,
                sigma_like_sq,
            } => alpha_from_variances(sigma_prior_sq, sigma_like_sq),
        }
    }
}

/// Which embedding is used to find neighbouring base classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalSource {
    /// Class-name embedding against the bank's name embeddings.
    #[default]
    ClassName,
    /// Support prototype against the bank's visual means (visual-distance baseline).
    VisualMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub k: usize,
    pub tau: f64,
    pub alpha: AlphaRule,
    #[serde(default)]
    pub source: RetrievalSource,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self::for_shots(1)
    }
}

impl PriorConfig {
    /// Defaults with the shot-dependent fusion weight (0.33 for 1-shot, 0.7 otherwise).
    pub fn for_shots(k_shot: usize) -> Self {
        let alpha = if k_shot <= 1 {
            ALPHA_ONE_SHOT
        } else {
            ALPHA_FEW_SHOT
        };
        Self {
            k: DEFAULT_K,
            tau: DEFAULT_TAU,
            alpha: AlphaRule::Fixed(alpha),
            source: RetrievalSource::ClassName,
        }
    }

    pub fn validate(&self, bank_len: usize) -> Result<()> {
        if self.k == 0 || self.k > bank_len {
            return Err(PmceError::InvalidConfig(format!(
                "k = {} must lie in 1..={bank_len}",
                self.k
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(PmceError::InvalidConfig(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        self.alpha.resolve().map(|_| ())
    }
}

fn cosine_rows(query: &[f64], keys: &Matrix, what: &str) -> Result<Vec<f64>> {
    if query.len() != keys.cols() {
        return Err(PmceError::DimensionMismatch(format!(
            "{what}: query length {} vs key width {}",
            query.len(),
            keys.cols()
        )));
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(PmceError::ZeroNorm(format!("{what} query")));
    }
    keys.iter_rows()
        .enumerate()
        .map(|(j, key)| {
            let kn = norm(key);
            if kn == 0.0 {
                return Err(PmceError::ZeroNorm(format!("{what} key {j}")));
            }
            Ok((dot(query, key) / (qn * kn)).clamp(-1.0, 1.0))
        })
        .collect()
}

/// Cosine similarity of `query_emb` to every class-name embedding in the bank.
pub fn cosine_scores(query_emb: &[f64], bank: &KnowledgeBank) -> Result<Vec<f64>> {
    cosine_rows(query_emb, bank.name_embs(), "class-name retrieval")
}

/// Cosine similarity of a visual vector to every bank mean.
pub fn visual_cosine_scores(visual: &[f64], bank: &KnowledgeBank) -> Result<Vec<f64>> {
    cosine_rows(visual, bank.means(), "visual retrieval")
}

/// Indices of the `k` largest scores, best first; equal scores keep ascending index order.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(PmceError::InvalidConfig(format!(
            "top_k: k = {k} outside 1..={}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    Ok(order)
}

/// Temperature softmax over the selected neighbours' scores.
pub fn prior_weights(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(PmceError::InvalidConfig(format!(
            "tau must be positive, got {tau}"
        )));
    }
    if scores.is_empty() {
        return Err(PmceError::InsufficientData("no neighbour scores".into()));
    }
    let scaled: Vec<f64> = scores.iter().map(|s| s / tau).collect();
    Ok(linalg::softmax(&scaled))
}

/// `sum_k w_k * mu_k` over the selected bank rows.
pub fn prior_mean(bank: &KnowledgeBank, neighbors: &[usize], weights: &[f64]) -> Result<Vec<f64>> {
    if neighbors.len() != weights.len() {
        return Err(PmceError::DimensionMismatch(format!(
            "{} neighbours but {} weights",
            neighbors.len(),
            weights.len()
        )));
    }
    let mut out = vec![0.0; bank.d_v()];
    for (&j, &w) in neighbors.iter().zip(weights) {
        if j >= bank.len() {
            return Err(PmceError::IndexOutOfRange {
                context: "prior_mean neighbour".into(),
                index: j,
                len: bank.len(),
            });
        }
        linalg::axpy(w, bank.mean(j), &mut out);
    }
    Ok(out)
}

/// `alpha * p_init + (1 - alpha) * mu_prior`. `alpha` must lie in `[0, 1]`.
pub fn map_fuse(p_init: &[f64], mu_prior: &[f64], alpha: f64) -> Vec<f64> {
    debug_assert!((0.0..=1.0).contains(&alpha));
    debug_assert_eq!(p_init.len(), mu_prior.len());
    p_init
        .iter()
        .zip(mu_prior)
        .map(|(p, m)| alpha * p + (1.0 - alpha) * m)
        .collect()
}

/// Posterior weight on the support evidence given the two spherical variances.
pub fn alpha_from_variances(sigma_prior_sq: f64, sigma_like_sq: f64) -> Result<f64> {
    if [sigma_prior_sq, sigma_like_sq]
        .iter()
        .any(|s| s.is_nan() || *s <= 0.0)
    {
        return Err(PmceError::InvalidConfig(format!(
            "variances must be positive, got prior {sigma_prior_sq}, likelihood {sigma_like_sq}"
        )));
    }
    Ok(sigma_prior_sq / (sigma_prior_sq + sigma_like_sq))
}

/// Every intermediate of one calibration, for diagnostics and per-sample fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub p_init: Vec<f64>,
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
    pub prior_mean: Vec<f64>,
    pub alpha: f64,
    pub prototype: Vec<f64>,
}

pub fn calibrate_prototype_detailed<R: AsRef<[f64]>>(
    support_feats: &[R],
    class_name_emb: &[f64],
    bank: &KnowledgeBank,
    cfg: &PriorConfig,
) -> Result<Calibration> {
    if support_feats.is_empty() {
        return Err(PmceError::InsufficientData(
            "calibration needs at least one support".into(),
        ));
    }
    cfg.validate(bank.len())?;
    let alpha = cfg.alpha.resolve()?;
    let p_init = linalg::mean_rows(support_feats);
    if p_init.len() != bank.d_v() {
        return Err(PmceError::DimensionMismatch(format!(
            "support dim {} vs bank d_v {}",
            p_init.len(),
            bank.d_v()
        )));
    }
    let scores = match cfg.source {
        RetrievalSource::ClassName => cosine_scores(class_name_emb, bank)?,
        RetrievalSource::VisualMean => visual_cosine_scores(&p_init, bank)?,
    };
    let neighbors = top_k(&scores, cfg.k)?;
    let selected: Vec<f64> = neighbors.iter().map(|&j| scores[j]).collect();
    let weights = prior_weights(&selected, cfg.tau)?;
    let prior = prior_mean(bank, &neighbors, &weights)?;
    let prototype = map_fuse(&p_init, &prior, alpha);
    Ok(Calibration {
        p_init,
        neighbors,
        weights,
        prior_mean: prior,
        alpha,
        prototype,
    })
}

/// MAP-calibrated prototype for one novel class.
pub fn calibrate_prototype<R: AsRef<[f64]>>(
    support_feats: &[R],
    class_name_emb: &[f64],
    bank: &KnowledgeBank,
    cfg: &PriorConfig,
) -> Result<Vec<f64>> {
    calibrate_prototype_detailed(support_feats, class_name_emb, bank, cfg).map(|c| c.prototype)
}
