//! Central finite-difference verification of the analytic gradients.
//!
//! The check perturbs one scalar at a time and re-evaluates the forward
//! objective only, so it shares no code with the reverse pass it audits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::enhancer::{self, EnhancerConfig};
use crate::error::{PmceError, Result};
use crate::linalg::{dot, Matrix};
use crate::objectives::{ClassifierParams, LossWeights};
use crate::trainer::{batch_objective, Sample, TrainableModel};

/// Distance from a ReLU or L1 kink below which an instance is redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub d_v: usize,
    pub d_t: usize,
    pub heads: usize,
    pub d_k: usize,
    pub tokens: usize,
    pub batch: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub weights: LossWeights,
    /// Corrupts one analytic gradient so the check must fail.
    pub inject_bug: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            d_v: 8,
            d_t: 6,
            heads: 2,
            d_k: 4,
            tokens: 3,
            batch: 5,
            num_classes: 3,
            seed: 0,
            step: 1e-4,
            tolerance: 1e-4,
            weights: LossWeights::default(),
            inject_bug: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|)`, or zero when both are exactly zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| scale * normal(rng)).collect(),
    )
}

/// A random model, batch and class-mean table for one check.
#[derive(Debug, Clone)]
pub struct CheckInstance {
    pub enhancer_cfg: EnhancerConfig,
    pub model: TrainableModel,
    pub batch: Vec<Sample>,
    pub class_means: Matrix,
}

impl CheckInstance {
    pub fn random(cfg: &GradCheckConfig, seed: u64) -> Result<Self> {
        let ecfg = EnhancerConfig {
            d_v: cfg.d_v,
            d_t: cfg.d_t,
            heads: cfg.heads,
            d_k: cfg.d_k,
            ln_eps: enhancer::DEFAULT_LN_EPS,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = TrainableModel::init(&ecfg, cfg.num_classes, seed)?;
        // Move away from the initial point so every path carries gradient.
        model.enhancer.residual_scale = 0.5 + 0.5 * rng.random::<f64>();
        for (_, t) in model.enhancer.tensors_mut() {
            t.iter_mut().for_each(|v| *v += 0.1 * normal(&mut rng));
        }
        model.classifier = ClassifierParams {
            weight: random_matrix(&mut rng, cfg.d_v, cfg.num_classes, 0.5),
            bias: (0..cfg.num_classes)
                .map(|_| 0.1 * normal(&mut rng))
                .collect(),
        };
        let batch = (0..cfg.batch)
            .map(|i| Sample {
                visual: (0..cfg.d_v).map(|_| normal(&mut rng)).collect(),
                context: random_matrix(&mut rng, cfg.tokens, cfg.d_t, 1.0),
                // Cycle labels so most anchors have an in-batch positive.
                label: i % cfg.num_classes.clamp(1, 2),
            })
            .collect();
        let class_means = random_matrix(&mut rng, cfg.num_classes, cfg.d_v, 1.0);
        Ok(Self {
            enhancer_cfg: ecfg,
            model,
            batch,
            class_means,
        })
    }

    /// Smallest distance of any ReLU input or L1 residual to its kink.
    pub fn kink_distance(&self) -> Result<f64> {
        let mut closest = f64::INFINITY;
        for s in &self.batch {
            let (v_out, cache) = enhancer::forward(
                &s.visual,
                &s.context,
                &self.model.enhancer,
                &self.enhancer_cfg,
            )?;
            for v in cache.pre_activation().as_slice() {
                closest = closest.min(v.abs());
            }
            for (v, m) in v_out.iter().zip(self.class_means.row(s.label)) {
                closest = closest.min((v - m).abs());
            }
        }
        Ok(closest)
    }

    fn objective(&self, model: &TrainableModel, weights: &LossWeights) -> Result<f64> {
        Ok(batch_objective(
            model,
            &self.enhancer_cfg,
            &self.batch,
            &self.class_means,
            weights,
        )?
        .total)
    }
}

/// Draws instances from `seed` onward until one sits clear of every kink.
pub fn smooth_instance(cfg: &GradCheckConfig) -> Result<CheckInstance> {
    for attempt in 0..1000u64 {
        let inst = CheckInstance::random(cfg, cfg.seed.wrapping_mul(1000).wrapping_add(attempt))?;
        if inst.kink_distance()? > KINK_MARGIN {
            return Ok(inst);
        }
    }
    Err(PmceError::InsufficientData(
        "no kink-free instance found in 1000 draws".into(),
    ))
}

fn summarize(name: String, analytic: &[f64], numeric: &[f64], tol: f64) -> TensorCheck {
    let mut rel = 0.0f64;
    let mut abs = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        rel = rel.max(relative_error(*a, *n));
        abs = abs.max((a - n).abs());
    }
    TensorCheck {
        name,
        len: analytic.len(),
        max_rel_err: rel,
        max_abs_err: abs,
        passed: rel < tol,
    }
}

/// Checks every enhancer and classifier tensor against the total objective.
pub fn check_total_objective(cfg: &GradCheckConfig) -> Result<Vec<TensorCheck>> {
    let inst = smooth_instance(cfg)?;
    let analytic = batch_objective(
        &inst.model,
        &inst.enhancer_cfg,
        &inst.batch,
        &inst.class_means,
        &cfg.weights,
    )?;
    let mut grads = analytic.grads;
    if cfg.inject_bug {
        grads.enhancer.heads[0]
            .value
            .as_mut_slice()
            .iter_mut()
            .for_each(|g| *g *= -1.0);
    }
    let analytic_flat = grads.flatten();
    let names: Vec<(String, usize)> = grads
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();

    let base = inst.model.flatten();
    let mut numeric = vec![0.0; base.len()];
    let mut probe = inst.model.clone();
    for k in 0..base.len() {
        let mut x = base.clone();
        x[k] = base[k] + cfg.step;
        probe.load_flat(&x)?;
        let up = inst.objective(&probe, &cfg.weights)?;
        x[k] = base[k] - cfg.step;
        probe.load_flat(&x)?;
        let down = inst.objective(&probe, &cfg.weights)?;
        numeric[k] = (up - down) / (2.0 * cfg.step);
    }

    let mut out = Vec::with_capacity(names.len() + 2);
    let mut offset = 0;
    for (name, len) in names {
        out.push(summarize(
            name,
            &analytic_flat[offset..offset + len],
            &numeric[offset..offset + len],
            cfg.tolerance,
        ));
        offset += len;
    }
    out.extend(check_enhancer_inputs(&inst, cfg)?);
    Ok(out)
}

/// Input gradients of the enhancer under the linear probe `L = <r, v_out>`.
fn check_enhancer_inputs(inst: &CheckInstance, cfg: &GradCheckConfig) -> Result<Vec<TensorCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let probe_dir: Vec<f64> = (0..cfg.d_v).map(|_| normal(&mut rng)).collect();
    let params = &inst.model.enhancer;
    let ecfg = &inst.enhancer_cfg;
    let s = &inst.batch[0];
    let loss = |v: &[f64], ctx: &Matrix| -> Result<f64> {
        Ok(dot(&probe_dir, &enhancer::forward(v, ctx, params, ecfg)?.0))
    };
    let (_, cache) = enhancer::forward(&s.visual, &s.context, params, ecfg)?;
    let grads = enhancer::backward(params, &cache, &probe_dir)?;

    let mut num_v = vec![0.0; cfg.d_v];
    for k in 0..cfg.d_v {
        let mut up = s.visual.clone();
        up[k] += cfg.step;
        let mut down = s.visual.clone();
        down[k] -= cfg.step;
        num_v[k] = (loss(&up, &s.context)? - loss(&down, &s.context)?) / (2.0 * cfg.step);
    }
    let mut num_s = vec![0.0; s.context.as_slice().len()];
    for (k, slot) in num_s.iter_mut().enumerate() {
        let mut up = s.context.clone();
        up.as_mut_slice()[k] += cfg.step;
        let mut down = s.context.clone();
        down.as_mut_slice()[k] -= cfg.step;
        *slot = (loss(&s.visual, &up)? - loss(&s.visual, &down)?) / (2.0 * cfg.step);
    }
    Ok(vec![
        summarize("input.v_in".into(), &grads.v_in, &num_v, cfg.tolerance),
        summarize(
            "input.s_in".into(),
            grads.s_in.as_slice(),
            &num_s,
            cfg.tolerance,
        ),
    ])
}
