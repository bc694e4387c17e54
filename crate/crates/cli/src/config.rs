//! `--config` JSON file plus per-flag overrides.

use std::path::Path;

use anyhow::{Context, Result};
use pmce_core::eval::{AblationFlags, ClassifierKind, EvalConfig, LrMode};
use pmce_core::prior::{AlphaRule, PriorConfig, RetrievalSource};
use pmce_core::{SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Evaluation settings as written by users. `alpha` left unset picks the
/// shot-dependent default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub episodes: usize,
    pub seed: u64,
    pub k: usize,
    pub tau: f64,
    pub alpha: Option<f64>,
    pub retrieval: RetrievalSource,
    pub classifier: ClassifierKind,
    pub use_map: bool,
    pub enhance_support: bool,
    pub enhance_query: bool,
    pub lr_l2: f64,
    pub lr_mode: LrMode,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalConfig::for_shots(1);
        Self {
            n_way: d.n_way,
            k_shot: d.k_shot,
            m_query: d.m_query,
            episodes: d.episodes,
            seed: d.seed,
            k: d.prior.k,
            tau: d.prior.tau,
            alpha: None,
            retrieval: d.prior.source,
            classifier: d.classifier,
            use_map: d.flags.use_map,
            enhance_support: d.flags.enhance_support,
            enhance_query: d.flags.enhance_query,
            lr_l2: d.lr_l2,
            lr_mode: d.lr_mode,
        }
    }
}

impl EvalSection {
    pub fn resolve(&self) -> EvalConfig {
        let defaults = PriorConfig::for_shots(self.k_shot);
        EvalConfig {
            n_way: self.n_way,
            k_shot: self.k_shot,
            m_query: self.m_query,
            episodes: self.episodes,
            seed: self.seed,
            prior: PriorConfig {
                k: self.k,
                tau: self.tau,
                alpha: self.alpha.map_or(defaults.alpha, AlphaRule::Fixed),
                source: self.retrieval,
            },
            classifier: self.classifier,
            flags: AblationFlags {
                use_map: self.use_map,
                enhance_support: self.enhance_support,
                enhance_query: self.enhance_query,
            },
            lr_l2: self.lr_l2,
            lr_mode: self.lr_mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhancerSection {
    pub heads: usize,
    /// Per-head key width; `d_v / heads` when unset.
    pub d_k: Option<usize>,
}

impl Default for EnhancerSection {
    fn default() -> Self {
        Self {
            heads: pmce_core::enhancer::DEFAULT_HEADS,
            d_k: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub enhancer: EnhancerSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Overwrites `$target` with every flag that was given.
macro_rules! apply_overrides {
    ($src:expr => $target:expr; $($field:ident),* $(,)?) => {
        $(if let Some(v) = $src.$field { $target.$field = v; })*
    };
}
pub(crate) use apply_overrides;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_keeps_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"eval": {"k_shot": 5}, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 128);
        let eval = cfg.eval.resolve();
        assert_eq!(eval.prior.alpha, AlphaRule::Fixed(0.7));
        assert_eq!(eval.m_query, 15);
    }

    #[test]
    fn explicit_alpha_wins() {
        let cfg: RunConfig = serde_json::from_str(r#"{"eval": {"alpha": 0.5}}"#).unwrap();
        assert_eq!(cfg.eval.resolve().prior.alpha, AlphaRule::Fixed(0.5));
    }
}
