//! Few-shot classification with semantics-guided prototype calibration and
//! caption-guided feature enhancement, over precomputed embeddings.

#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod codec;
pub mod enhancer;
pub mod error;
pub mod eval;
pub mod feature_store;
pub mod gradcheck;
pub mod knowledge_bank;
pub mod linalg;
pub mod objectives;
pub mod prior;
pub mod synthetic;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use enhancer::{Enhancer, EnhancerConfig, EnhancerParams};
pub use error::{PmceError, Result};
pub use eval::{
    evaluate, evaluate_ablation, AblationFlags, ClassifierKind, Episode, EvalConfig, EvalReport,
    LrMode,
};
pub use feature_store::{
    read_store, write_store, DatasetSplit, FeatureRecord, SplitName, StoreManifest,
};
pub use knowledge_bank::{build_bank, load_bank, save_bank, KnowledgeBank};
pub use linalg::Matrix;
pub use objectives::{ClassifierParams, LossWeights};
pub use prior::{AlphaRule, PriorConfig, RetrievalSource};
pub use synthetic::SynthConfig;
pub use trainer::{AdamConfig, TrainConfig, TrainLog, TrainableModel};
