//! Base-class training of the enhancer together with an auxiliary classifier.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::enhancer::{self, EnhancerConfig, EnhancerParams, ForwardCache};
use crate::error::{PmceError, Result};
use crate::feature_store::DatasetSplit;
use crate::knowledge_bank::KnowledgeBank;
use crate::linalg::{self, Matrix};
use crate::objectives::{
    cross_entropy, rec_loss, supcon_loss, total_loss, ClassifierParams, LossComponents, LossWeights,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(PmceError::DimensionMismatch(format!(
            "adam: {n} params, {} grads, state sizes {}/{}",
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            adam: AdamConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(PmceError::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(a.lr >= 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0)
        {
            return Err(PmceError::InvalidConfig(format!(
                "bad optimizer settings {a:?}"
            )));
        }
        self.weights.validate()
    }
}

/// Enhancer plus auxiliary classifier; the unit the optimizer updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainableModel {
    pub enhancer: EnhancerParams,
    pub classifier: ClassifierParams,
}

impl TrainableModel {
    pub fn init(cfg: &EnhancerConfig, num_classes: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            enhancer: EnhancerParams::init(cfg, seed)?,
            classifier: ClassifierParams::init(cfg.d_v, num_classes, seed.wrapping_add(1)),
        })
    }

    pub fn zeros(cfg: &EnhancerConfig, num_classes: usize) -> Self {
        Self {
            enhancer: EnhancerParams::zeros(cfg),
            classifier: ClassifierParams::zeros(cfg.d_v, num_classes),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut t = self.enhancer.tensors();
        t.extend(self.classifier.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut t = self.enhancer.tensors_mut();
        t.extend(self.classifier.tensors_mut());
        t
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.tensors().iter().map(|(_, t)| t.len()).sum();
        if flat.len() != total {
            return Err(PmceError::DimensionMismatch(format!(
                "flat vector has {} entries, model has {total}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }
}

/// One training example: frozen visual feature, `T x d_t` semantic context, label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub visual: Vec<f64>,
    pub context: Matrix,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub components: LossComponents,
    pub total: f64,
    pub grads: TrainableModel,
}

/// Total objective on a batch and its exact gradient w.r.t. every model tensor.
///
/// The contrastive term reads the token-averaged projected context of each
/// sample; with a single token that is the projected caption itself. Batches
/// of one sample skip the contrastive term.
pub fn batch_objective(
    model: &TrainableModel,
    cfg: &EnhancerConfig,
    batch: &[Sample],
    class_means: &Matrix,
    weights: &LossWeights,
) -> Result<BatchResult> {
    let b = batch.len();
    if b == 0 {
        return Err(PmceError::InsufficientData("empty batch".into()));
    }
    let c = model.classifier.num_classes();
    let mut outputs = Matrix::zeros(b, cfg.d_v);
    let mut logits = Matrix::zeros(b, c);
    let mut pooled = Matrix::zeros(b, cfg.d_v);
    let mut caches: Vec<ForwardCache> = Vec::with_capacity(b);
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    for (i, s) in batch.iter().enumerate() {
        let (v_out, cache) = enhancer::forward(&s.visual, &s.context, &model.enhancer, cfg)?;
        logits
            .row_mut(i)
            .copy_from_slice(&model.classifier.logits(&v_out));
        pooled.row_mut(i).copy_from_slice(&linalg::mean_rows(
            &cache.s_proj().iter_rows().collect::<Vec<_>>(),
        ));
        outputs.row_mut(i).copy_from_slice(&v_out);
        caches.push(cache);
    }

    let (cls, g_logits) = cross_entropy(&logits, &labels)?;
    let (rec, g_rec) = rec_loss(&outputs, &labels, class_means)?;
    let (con, g_pooled) = if b >= 2 && weights.lambda_con != 0.0 {
        supcon_loss(&pooled, &labels, weights.tau_c)?
    } else if b >= 2 {
        (
            supcon_loss(&pooled, &labels, weights.tau_c)?.0,
            Matrix::zeros(b, cfg.d_v),
        )
    } else {
        (0.0, Matrix::zeros(b, cfg.d_v))
    };
    let components = LossComponents { cls, rec, con };

    let mut grads = TrainableModel::zeros(cfg, c);
    for i in 0..b {
        let v_out = outputs.row(i);
        let gl = g_logits.row(i);
        grads.classifier.weight.add_outer(1.0, v_out, gl);
        linalg::axpy(1.0, gl, &mut grads.classifier.bias);
        let mut g_v = model.classifier.weight.mul_vec(gl);
        linalg::axpy(weights.lambda_rec, g_rec.row(i), &mut g_v);

        let t = caches[i].s_proj().rows();
        let per_token: Vec<f64> = g_pooled
            .row(i)
            .iter()
            .map(|g| weights.lambda_con * g / t as f64)
            .collect();
        let g_proj = Matrix::from_rows(&vec![per_token; t]);
        enhancer::backward_into(
            &model.enhancer,
            &caches[i],
            &g_v,
            Some(&g_proj),
            &mut grads.enhancer,
        )?;
    }
    Ok(BatchResult {
        components,
        total: total_loss(&components, weights),
        grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub cls: f64,
    pub rec: f64,
    pub con: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// One JSON object per line, one line per completed epoch.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch log serializes") + "\n")
            .collect()
    }
}

/// Turns every base record into a single-token training sample.
pub fn samples_from_split(split: &DatasetSplit) -> Vec<Sample> {
    split
        .records
        .iter()
        .map(|r| Sample {
            visual: linalg::widen(&r.visual),
            context: Matrix::from_vec(1, r.caption_emb.len(), linalg::widen(&r.caption_emb)),
            label: r.class_id as usize,
        })
        .collect()
}

pub fn train(
    base: &DatasetSplit,
    bank: &KnowledgeBank,
    enh_cfg: &EnhancerConfig,
    cfg: &TrainConfig,
) -> Result<(TrainableModel, TrainLog)> {
    train_with_progress(base, bank, enh_cfg, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with_progress(
    base: &DatasetSplit,
    bank: &KnowledgeBank,
    enh_cfg: &EnhancerConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(TrainableModel, TrainLog)> {
    cfg.validate()?;
    enh_cfg.validate()?;
    if base.d_v() != enh_cfg.d_v || base.d_t() != enh_cfg.d_t {
        return Err(PmceError::DimensionMismatch(format!(
            "base split dims ({}, {}) vs enhancer ({}, {})",
            base.d_v(),
            base.d_t(),
            enh_cfg.d_v,
            enh_cfg.d_t
        )));
    }
    if bank.len() != base.num_classes() || bank.d_v() != enh_cfg.d_v {
        return Err(PmceError::DimensionMismatch(format!(
            "bank has {} classes of width {}, base split has {} classes",
            bank.len(),
            bank.d_v(),
            base.num_classes()
        )));
    }
    let samples = samples_from_split(base);
    if samples.is_empty() {
        return Err(PmceError::InsufficientData(
            "base split has no records".into(),
        ));
    }
    let mut model = TrainableModel::init(enh_cfg, base.num_classes(), cfg.seed)?;
    let mut flat = model.flatten();
    let mut state = AdamState::new(flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let res = batch_objective(&model, enh_cfg, &batch, bank.means(), &cfg.weights)?;
            if !res.total.is_finite() {
                return Err(PmceError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: format!("{:?}", res.components),
                });
            }
            let w = chunk.len() as f64;
            sums[0] += w * res.total;
            sums[1] += w * res.components.cls;
            sums[2] += w * res.components.rec;
            sums[3] += w * res.components.con;
            adam_step(&mut flat, &res.grads.flatten(), &mut state, &cfg.adam)?;
            model.load_flat(&flat)?;
        }
        let n = samples.len() as f64;
        let entry = EpochLog {
            epoch,
            total: sums[0] / n,
            cls: sums[1] / n,
            rec: sums[2] / n,
            con: sums[3] / n,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok((model, log))
}
