//! Inductive N-way K-shot evaluation.

mod classifier;
mod episode;
mod report;

pub use classifier::{
    classify_lr, classify_nearest, fit_logistic, ClassifierKind, LogisticModel, NearestMetric,
    LR_GRAD_TOL, LR_MAX_ITERS,
};
pub use episode::{aggregate_support_semantics, sample_episode, Episode, EpisodeSampler};
pub use report::{aggregate_report, paired_t_test, PairedTest, Summary, Z_95};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enhancer::Enhancer;
use crate::error::{PmceError, Result};
use crate::feature_store::DatasetSplit;
use crate::knowledge_bank::KnowledgeBank;
use crate::linalg::{self, widen, Matrix};
use crate::prior::{calibrate_prototype_detailed, map_fuse, PriorConfig};

pub const DEFAULT_N_WAY: usize = 5;
pub const DEFAULT_M_QUERY: usize = 15;
pub const DEFAULT_EPISODES: usize = 600;
pub const DEFAULT_LR_L2: f64 = 1.0;

/// Which pipeline stages are active. All off is the plain prototypical baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_map: bool,
    pub enhance_support: bool,
    pub enhance_query: bool,
}

impl AblationFlags {
    pub const BASELINE: Self = Self {
        use_map: false,
        enhance_support: false,
        enhance_query: false,
    };
    pub const FULL: Self = Self {
        use_map: true,
        enhance_support: true,
        enhance_query: true,
    };

    /// All eight combinations, baseline first and full pipeline last.
    pub fn lattice() -> [Self; 8] {
        std::array::from_fn(|i| Self {
            use_map: i & 4 != 0,
            enhance_support: i & 2 != 0,
            enhance_query: i & 1 != 0,
        })
    }

    pub fn needs_enhancer(&self) -> bool {
        self.enhance_support || self.enhance_query
    }

    /// Short label such as `map+sup+qry` or `baseline`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.use_map, "map"),
            (self.enhance_support, "sup"),
            (self.enhance_query, "qry"),
        ]
        .into_iter()
        .filter_map(|(on, name)| on.then_some(name))
        .collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

/// Training points for the logistic-regression classifier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrMode {
    /// One final prototype per class.
    #[default]
    Prototypes,
    /// Every support sample, each fused with its class prior and enhanced with its own caption.
    Supports,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub episodes: usize,
    pub seed: u64,
    pub prior: PriorConfig,
    pub classifier: ClassifierKind,
    pub flags: AblationFlags,
    pub lr_l2: f64,
    #[serde(default)]
    pub lr_mode: LrMode,
}

impl EvalConfig {
    /// 5-way, 15 queries, 600 episodes, full pipeline with LR and the shot-dependent prior.
    pub fn for_shots(k_shot: usize) -> Self {
        Self {
            n_way: DEFAULT_N_WAY,
            k_shot,
            m_query: DEFAULT_M_QUERY,
            episodes: DEFAULT_EPISODES,
            seed: 0,
            prior: PriorConfig::for_shots(k_shot),
            classifier: ClassifierKind::Lr,
            flags: AblationFlags::FULL,
            lr_l2: DEFAULT_LR_L2,
            lr_mode: LrMode::Prototypes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(PmceError::InvalidConfig(
                "episodes must be at least 1".into(),
            ));
        }
        if self.n_way == 0 || self.k_shot == 0 || self.m_query == 0 {
            return Err(PmceError::InvalidConfig(
                "n_way, k_shot and m_query must be positive".into(),
            ));
        }
        if self.classifier == ClassifierKind::Lr && self.n_way < 2 {
            return Err(PmceError::InvalidConfig(
                "logistic regression needs n_way >= 2".into(),
            ));
        }
        if !(self.lr_l2 > 0.0 && self.lr_l2.is_finite()) {
            return Err(PmceError::InvalidConfig(format!(
                "lr_l2 must be positive, got {}",
                self.lr_l2
            )));
        }
        Ok(())
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::for_shots(1)
    }
}

/// Per-query outcome of one episode, queries in class-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePredictions {
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    /// `Some(converged)` when logistic regression was fitted.
    pub lr_converged: Option<bool>,
}

impl EpisodePredictions {
    pub fn accuracy(&self) -> f64 {
        let correct = self
            .predictions
            .iter()
            .zip(&self.labels)
            .filter(|(p, l)| p == l)
            .count();
        correct as f64 / self.labels.len() as f64
    }
}

fn single_token(emb: &[f64]) -> Matrix {
    Matrix::from_vec(1, emb.len(), emb.to_vec())
}

fn require_enhancer<'a>(
    enhancer: Option<&'a Enhancer>,
    flags: &AblationFlags,
) -> Result<Option<&'a Enhancer>> {
    match (flags.needs_enhancer(), enhancer) {
        (true, None) => Err(PmceError::InvalidConfig(format!(
            "variant `{}` enhances features but no enhancer was supplied",
            flags.label()
        ))),
        (true, Some(e)) => Ok(Some(e)),
        (false, _) => Ok(None),
    }
}

/// Final representation of one query: `Phi(z_q, s_inst)` or `z_q`.
pub fn query_feature(
    visual: &[f32],
    caption_emb: &[f32],
    enhancer: Option<&Enhancer>,
    flags: &AblationFlags,
) -> Result<Vec<f64>> {
    let z = widen(visual);
    match require_enhancer(enhancer, flags)? {
        Some(e) if flags.enhance_query => e.apply(&z, &single_token(&widen(caption_emb))),
        _ => Ok(z),
    }
}

/// Classifies every query of `ep`. Each query is scored on its own.
pub fn predict_episode(
    ep: &Episode,
    bank: &KnowledgeBank,
    enhancer: Option<&Enhancer>,
    cfg: &EvalConfig,
) -> Result<EpisodePredictions> {
    let flags = cfg.flags;
    let enh = require_enhancer(enhancer, &flags)?;
    let mut prototypes = Vec::with_capacity(ep.n_way());
    // Support-level training points for the LR supports mode.
    let mut sample_points = Vec::new();
    let mut sample_labels = Vec::new();

    for c in 0..ep.n_way() {
        let supports: Vec<Vec<f64>> = ep.support[c].iter().map(|r| widen(&r.visual)).collect();
        let captions: Vec<Vec<f64>> = ep.support[c]
            .iter()
            .map(|r| widen(&r.caption_emb))
            .collect();
        let (proto, prior) = if flags.use_map {
            let cal = calibrate_prototype_detailed(
                &supports,
                &widen(&ep.name_embs[c]),
                bank,
                &cfg.prior,
            )?;
            (cal.prototype, Some((cal.prior_mean, cal.alpha)))
        } else {
            (linalg::mean_rows(&supports), None)
        };
        let proto = match enh {
            Some(e) if flags.enhance_support => {
                let s_proto = aggregate_support_semantics(&captions)?;
                e.apply(&proto, &single_token(&s_proto))?
            }
            _ => proto,
        };
        prototypes.push(proto);

        if cfg.classifier == ClassifierKind::Lr && cfg.lr_mode == LrMode::Supports {
            for (x, s) in supports.iter().zip(&captions) {
                let fused = match &prior {
                    Some((mu, alpha)) => map_fuse(x, mu, *alpha),
                    None => x.clone(),
                };
                let point = match enh {
                    Some(e) if flags.enhance_support => e.apply(&fused, &single_token(s))?,
                    _ => fused,
                };
                sample_points.push(point);
                sample_labels.push(c);
            }
        }
    }

    let mut queries = Vec::with_capacity(ep.num_queries());
    let mut labels = Vec::with_capacity(ep.num_queries());
    for (c, q) in ep.labelled_queries() {
        queries.push(query_feature(&q.visual, &q.caption_emb, enh, &flags)?);
        labels.push(c);
    }

    let (predictions, lr_converged) = match cfg.classifier {
        ClassifierKind::Lr => {
            let model = match cfg.lr_mode {
                LrMode::Prototypes => {
                    let ids: Vec<usize> = (0..prototypes.len()).collect();
                    fit_logistic(&prototypes, &ids, prototypes.len(), cfg.lr_l2)?
                }
                LrMode::Supports => {
                    fit_logistic(&sample_points, &sample_labels, ep.n_way(), cfg.lr_l2)?
                }
            };
            let preds = queries.iter().map(|q| model.predict(q)).collect();
            (preds, Some(model.converged))
        }
        ClassifierKind::Eu => (
            classify_nearest(&prototypes, &queries, NearestMetric::Euclidean)?,
            None,
        ),
        ClassifierKind::Co => (
            classify_nearest(&prototypes, &queries, NearestMetric::Cosine)?,
            None,
        ),
    };
    Ok(EpisodePredictions {
        predictions,
        labels,
        lr_converged,
    })
}

/// Fraction of the episode's `N * M` queries classified correctly.
pub fn run_episode(
    ep: &Episode,
    bank: &KnowledgeBank,
    enhancer: Option<&Enhancer>,
    cfg: &EvalConfig,
) -> Result<f64> {
    predict_episode(ep, bank, enhancer, cfg).map(|p| p.accuracy())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub variant: String,
    pub mean: f64,
    pub ci95_half_width: f64,
    pub std: f64,
    /// Episodes whose logistic-regression fit hit the iteration cap.
    pub lr_unconverged: usize,
    pub accuracies: Vec<f64>,
}

impl EvalReport {
    pub fn summary(&self) -> Summary {
        Summary {
            episodes: self.accuracies.len(),
            mean: self.mean,
            std: self.std,
            ci95_half_width: self.ci95_half_width,
        }
    }

    /// Per-episode accuracies as `episode,accuracy` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,accuracy\n");
        for (i, a) in self.accuracies.iter().enumerate() {
            out.push_str(&format!("{i},{a}\n"));
        }
        out
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PmceError::InvalidConfig(format!("cannot build thread pool: {e}")))
}

/// Runs `cfg.episodes` episodes on `jobs` threads. The report does not depend on `jobs`.
pub fn evaluate(
    novel: &DatasetSplit,
    bank: &KnowledgeBank,
    enhancer: Option<&Enhancer>,
    cfg: &EvalConfig,
    jobs: usize,
) -> Result<EvalReport> {
    cfg.validate()?;
    cfg.prior.validate(bank.len())?;
    require_enhancer(enhancer, &cfg.flags)?;
    if novel.d_v() != bank.d_v() || novel.d_t() != bank.d_t() {
        return Err(PmceError::DimensionMismatch(format!(
            "novel split dims ({}, {}) vs bank ({}, {})",
            novel.d_v(),
            novel.d_t(),
            bank.d_v(),
            bank.d_t()
        )));
    }
    let sampler = EpisodeSampler::new(novel, cfg.n_way, cfg.k_shot, cfg.m_query, cfg.seed)?;
    let outcomes: Vec<EpisodePredictions> = thread_pool(jobs)?.install(|| {
        (0..cfg.episodes as u64)
            .into_par_iter()
            .map(|i| predict_episode(&sampler.sample(i), bank, enhancer, cfg))
            .collect::<Result<_>>()
    })?;
    let accuracies: Vec<f64> = outcomes.iter().map(EpisodePredictions::accuracy).collect();
    let lr_unconverged = outcomes
        .iter()
        .filter(|o| o.lr_converged == Some(false))
        .count();
    let (mean, std, ci95_half_width) = if accuracies.len() >= 2 {
        let s = aggregate_report(&accuracies)?;
        (s.mean, s.std, s.ci95_half_width)
    } else {
        // A single episode has no interval.
        (accuracies[0], 0.0, 0.0)
    };
    Ok(EvalReport {
        config: *cfg,
        variant: cfg.flags.label(),
        mean,
        ci95_half_width,
        std,
        lr_unconverged,
        accuracies,
    })
}

/// One report per ablation variant, all on the same episodes.
pub fn evaluate_ablation(
    novel: &DatasetSplit,
    bank: &KnowledgeBank,
    enhancer: Option<&Enhancer>,
    cfg: &EvalConfig,
    jobs: usize,
) -> Result<Vec<EvalReport>> {
    AblationFlags::lattice()
        .iter()
        .map(|flags| {
            let cfg = EvalConfig {
                flags: *flags,
                ..*cfg
            };
            evaluate(novel, bank, enhancer, &cfg, jobs)
        })
        .collect()
}
