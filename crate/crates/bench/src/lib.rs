//! Shared fixtures for the criterion benches.

use pmce_core::synthetic::{generate, SynthConfig};
use pmce_core::{
    build_bank, DatasetSplit, Enhancer, EnhancerConfig, EnhancerParams, KnowledgeBank,
};

pub struct Workload {
    pub base: DatasetSplit,
    pub novel: DatasetSplit,
    pub bank: KnowledgeBank,
    pub enhancer: Enhancer,
}

/// Default synthetic store with a freshly initialised (untrained) enhancer.
pub fn workload() -> Workload {
    let (base, novel) = generate(&SynthConfig::default()).expect("synthetic store");
    let bank = build_bank(&base).expect("bank");
    let cfg = EnhancerConfig::for_dims(base.d_v(), base.d_t());
    let enhancer =
        Enhancer::new(cfg, EnhancerParams::init(&cfg, 0).expect("init")).expect("enhancer");
    Workload {
        base,
        novel,
        bank,
        enhancer,
    }
}
