//! Caption-guided enhancer: semantic projection, multi-head cross-attention
//! with the visual anchor as the single query, and a scaled residual.
//!
//! ```text
//! S_proj = ReLU(LN(S_in W_p + b_p))                     T x d_v
//! head_i = softmax(v_in W_Q_i (S_proj W_K_i)^T / sqrt(d_k)) S_proj W_V_i
//! dv     = [head_1 .. head_h] W_O                        1 x d_v
//! v_out  = v_in + beta * dv
//! ```
//!
//! All arithmetic is `f64`; [`backward`] is exact reverse mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PmceError, Result};
use crate::linalg::{self, axpy, dot, Matrix};

pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_LN_EPS: f64 = 1e-5;
pub const INITIAL_RESIDUAL_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnhancerConfig {
    pub d_v: usize,
    pub d_t: usize,
    pub heads: usize,
    pub d_k: usize,
    pub ln_eps: f64,
}

impl EnhancerConfig {
    /// Four heads with `d_k = d_v / 4` (falls back to one head when `d_v` is not divisible).
    pub fn for_dims(d_v: usize, d_t: usize) -> Self {
        let heads = if d_v.is_multiple_of(DEFAULT_HEADS) && d_v >= DEFAULT_HEADS {
            DEFAULT_HEADS
        } else {
            1
        };
        Self {
            d_v,
            d_t,
            heads,
            d_k: d_v / heads,
            ln_eps: DEFAULT_LN_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_v < 2 || self.d_t == 0 || self.heads == 0 || self.d_k == 0 {
            return Err(PmceError::InvalidConfig(format!(
                "enhancer needs d_v >= 2 and positive d_t, heads, d_k; got {self:?}"
            )));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(PmceError::InvalidConfig("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn concat_width(&self) -> usize {
        self.heads * self.d_k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

/// Learnable tensors of the enhancer. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancerParams {
    /// `d_t x d_v`
    pub proj_weight: Matrix,
    pub proj_bias: Vec<f64>,
    pub ln_gamma: Vec<f64>,
    pub ln_beta: Vec<f64>,
    pub heads: Vec<AttentionHead>,
    /// `(heads * d_k) x d_v`, no bias.
    pub out_proj: Matrix,
    pub residual_scale: f64,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect();
    Matrix::from_vec(rows, cols, data)
}

impl EnhancerParams {
    /// All tensors zero, including `residual_scale` and `ln_gamma`.
    pub fn zeros(cfg: &EnhancerConfig) -> Self {
        Self {
            proj_weight: Matrix::zeros(cfg.d_t, cfg.d_v),
            proj_bias: vec![0.0; cfg.d_v],
            ln_gamma: vec![0.0; cfg.d_v],
            ln_beta: vec![0.0; cfg.d_v],
            heads: (0..cfg.heads)
                .map(|_| AttentionHead {
                    query: Matrix::zeros(cfg.d_v, cfg.d_k),
                    key: Matrix::zeros(cfg.d_v, cfg.d_k),
                    value: Matrix::zeros(cfg.d_v, cfg.d_k),
                })
                .collect(),
            out_proj: Matrix::zeros(cfg.concat_width(), cfg.d_v),
            residual_scale: 0.0,
        }
    }

    /// Fan-based uniform weights, zero biases, identity LayerNorm affine and
    /// `residual_scale = 0.1`.
    pub fn init(cfg: &EnhancerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj_weight = glorot(&mut rng, cfg.d_t, cfg.d_v);
        let heads = (0..cfg.heads)
            .map(|_| AttentionHead {
                query: glorot(&mut rng, cfg.d_v, cfg.d_k),
                key: glorot(&mut rng, cfg.d_v, cfg.d_k),
                value: glorot(&mut rng, cfg.d_v, cfg.d_k),
            })
            .collect();
        let out_proj = glorot(&mut rng, cfg.concat_width(), cfg.d_v);
        Ok(Self {
            proj_weight,
            proj_bias: vec![0.0; cfg.d_v],
            ln_gamma: vec![1.0; cfg.d_v],
            ln_beta: vec![0.0; cfg.d_v],
            heads,
            out_proj,
            residual_scale: INITIAL_RESIDUAL_SCALE,
        })
    }

    /// Shape of every tensor, in the canonical serialization order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("proj_weight".into(), self.proj_weight.as_slice()),
            ("proj_bias".into(), &self.proj_bias),
            ("ln_gamma".into(), &self.ln_gamma),
            ("ln_beta".into(), &self.ln_beta),
        ];
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("head{i}.query"), h.query.as_slice()));
            out.push((format!("head{i}.key"), h.key.as_slice()));
            out.push((format!("head{i}.value"), h.value.as_slice()));
        }
        out.push(("out_proj".into(), self.out_proj.as_slice()));
        out.push((
            "residual_scale".into(),
            std::slice::from_ref(&self.residual_scale),
        ));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("proj_weight".into(), self.proj_weight.as_mut_slice()),
            ("proj_bias".into(), &mut self.proj_bias),
            ("ln_gamma".into(), &mut self.ln_gamma),
            ("ln_beta".into(), &mut self.ln_beta),
        ];
        for (i, h) in self.heads.iter_mut().enumerate() {
            out.push((format!("head{i}.query"), h.query.as_mut_slice()));
            out.push((format!("head{i}.key"), h.key.as_mut_slice()));
            out.push((format!("head{i}.value"), h.value.as_mut_slice()));
        }
        out.push(("out_proj".into(), self.out_proj.as_mut_slice()));
        out.push((
            "residual_scale".into(),
            std::slice::from_mut(&mut self.residual_scale),
        ));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    /// Overwrites every tensor from a flat vector in canonical order.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(PmceError::DimensionMismatch(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// Dims implied by the tensor shapes.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d_k = self.heads.first().map_or(0, |h| h.query.cols());
        (
            self.proj_weight.cols(),
            self.proj_weight.rows(),
            self.heads.len(),
            d_k,
        )
    }

    pub fn matches(&self, cfg: &EnhancerConfig) -> bool {
        self.dims() == (cfg.d_v, cfg.d_t, cfg.heads, cfg.d_k)
            && self.out_proj.shape() == (cfg.concat_width(), cfg.d_v)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Configuration and parameters together, as loaded from a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Enhancer {
    pub config: EnhancerConfig,
    pub params: EnhancerParams,
}

impl Enhancer {
    pub fn new(config: EnhancerConfig, params: EnhancerParams) -> Result<Self> {
        config.validate()?;
        if !params.matches(&config) {
            return Err(PmceError::DimensionMismatch(format!(
                "parameters have dims {:?}, config {:?}",
                params.dims(),
                config
            )));
        }
        Ok(Self { config, params })
    }

    /// `Phi(v_in, S_in)` without keeping the cache.
    pub fn apply(&self, v_in: &[f64], s_in: &Matrix) -> Result<Vec<f64>> {
        forward(v_in, s_in, &self.params, &self.config).map(|(v, _)| v)
    }
}

/// Population-variance LayerNorm with affine `gamma`, `beta`.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let (xhat, _) = normalize(x, eps);
    xhat.iter()
        .zip(gamma)
        .zip(beta)
        .map(|((h, g), b)| h * g + b)
        .collect()
}

fn normalize(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    (x.iter().map(|v| (v - mean) * rstd).collect(), rstd)
}

#[derive(Debug, Clone)]
struct HeadCache {
    query: Vec<f64>,
    keys: Matrix,
    values: Matrix,
    attn: Vec<f64>,
}

/// Intermediates of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    v_in: Vec<f64>,
    s_in: Matrix,
    xhat: Matrix,
    rstd: Vec<f64>,
    pre_relu: Matrix,
    s_proj: Matrix,
    heads: Vec<HeadCache>,
    concat: Vec<f64>,
    delta: Vec<f64>,
    residual_scale: f64,
}

impl ForwardCache {
    /// Projected semantic tokens, `T x d_v`.
    pub fn s_proj(&self) -> &Matrix {
        &self.s_proj
    }

    /// LayerNorm outputs before the ReLU, `T x d_v`.
    pub fn pre_activation(&self) -> &Matrix {
        &self.pre_relu
    }

    /// Attention residual before scaling.
    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    /// Attention weights of head `i` over the `T` tokens.
    pub fn attention(&self, i: usize) -> &[f64] {
        &self.heads[i].attn
    }
}

/// `ReLU(LN(S_in W_p + b_p))` row by row.
pub fn project_semantics(
    s_in: &Matrix,
    params: &EnhancerParams,
    cfg: &EnhancerConfig,
) -> Result<Matrix> {
    check_dims(params, cfg, cfg.d_v, s_in)?;
    let (_, _, _, proj) = project(s_in, params, cfg.ln_eps);
    Ok(proj)
}

fn project(s_in: &Matrix, params: &EnhancerParams, eps: f64) -> (Matrix, Vec<f64>, Matrix, Matrix) {
    let (t, d_v) = (s_in.rows(), params.proj_weight.cols());
    let mut xhat = Matrix::zeros(t, d_v);
    let mut rstd = vec![0.0; t];
    let mut pre = Matrix::zeros(t, d_v);
    let mut proj = Matrix::zeros(t, d_v);
    for r in 0..t {
        let mut z = params.proj_weight.vec_mul(s_in.row(r));
        axpy(1.0, &params.proj_bias, &mut z);
        let (h, s) = normalize(&z, eps);
        rstd[r] = s;
        for c in 0..d_v {
            let y = h[c] * params.ln_gamma[c] + params.ln_beta[c];
            pre.set(r, c, y);
            proj.set(r, c, y.max(0.0));
        }
        xhat.row_mut(r).copy_from_slice(&h);
    }
    (xhat, rstd, pre, proj)
}

fn check_dims(
    params: &EnhancerParams,
    cfg: &EnhancerConfig,
    v_len: usize,
    s_in: &Matrix,
) -> Result<()> {
    if !params.matches(cfg) {
        return Err(PmceError::DimensionMismatch(format!(
            "parameters have dims {:?}, config expects {:?}",
            params.dims(),
            (cfg.d_v, cfg.d_t, cfg.heads, cfg.d_k)
        )));
    }
    if v_len != cfg.d_v {
        return Err(PmceError::DimensionMismatch(format!(
            "visual anchor has length {v_len}, expected d_v={}",
            cfg.d_v
        )));
    }
    if s_in.rows() == 0 || s_in.cols() != cfg.d_t {
        return Err(PmceError::DimensionMismatch(format!(
            "semantic context is {}x{}, expected Tx{} with T >= 1",
            s_in.rows(),
            s_in.cols(),
            cfg.d_t
        )));
    }
    Ok(())
}

/// Enhances one visual anchor with a `T x d_t` semantic context.
pub fn forward(
    v_in: &[f64],
    s_in: &Matrix,
    params: &EnhancerParams,
    cfg: &EnhancerConfig,
) -> Result<(Vec<f64>, ForwardCache)> {
    check_dims(params, cfg, v_in.len(), s_in)?;
    let (xhat, rstd, pre_relu, s_proj) = project(s_in, params, cfg.ln_eps);
    let scale = 1.0 / (cfg.d_k as f64).sqrt();
    let mut concat = Vec::with_capacity(cfg.concat_width());
    let mut heads = Vec::with_capacity(cfg.heads);
    for head in &params.heads {
        let query = head.query.vec_mul(v_in);
        let keys = s_proj.matmul(&head.key);
        let values = s_proj.matmul(&head.value);
        let logits: Vec<f64> = keys.iter_rows().map(|k| dot(&query, k) * scale).collect();
        let attn = linalg::softmax(&logits);
        concat.extend(values.vec_mul(&attn));
        heads.push(HeadCache {
            query,
            keys,
            values,
            attn,
        });
    }
    let delta = params.out_proj.vec_mul(&concat);
    let beta = params.residual_scale;
    let v_out = v_in.iter().zip(&delta).map(|(v, d)| v + beta * d).collect();
    let cache = ForwardCache {
        v_in: v_in.to_vec(),
        s_in: s_in.clone(),
        xhat,
        rstd,
        pre_relu,
        s_proj,
        heads,
        concat,
        delta,
        residual_scale: beta,
    };
    Ok((v_out, cache))
}

#[derive(Debug, Clone)]
pub struct EnhancerGrads {
    pub params: EnhancerParams,
    pub v_in: Vec<f64>,
    pub s_in: Matrix,
}

/// Reverse pass for `grad_v_out = dL/dv_out`.
pub fn backward(
    params: &EnhancerParams,
    cache: &ForwardCache,
    grad_v_out: &[f64],
) -> Result<EnhancerGrads> {
    let (d_v, d_t, h, d_k) = params.dims();
    let cfg = EnhancerConfig {
        d_v,
        d_t,
        heads: h,
        d_k,
        ln_eps: DEFAULT_LN_EPS,
    };
    let mut grads = EnhancerParams::zeros(&cfg);
    let (v_in, s_in) = backward_into(params, cache, grad_v_out, None, &mut grads)?;
    Ok(EnhancerGrads {
        params: grads,
        v_in,
        s_in,
    })
}

/// Accumulates parameter gradients into `grads` and returns `(dL/dv_in, dL/dS_in)`.
///
/// `grad_s_proj` is an extra upstream gradient on the projected tokens, for
/// losses that read `S_proj` directly.
pub fn backward_into(
    params: &EnhancerParams,
    cache: &ForwardCache,
    grad_v_out: &[f64],
    grad_s_proj: Option<&Matrix>,
    grads: &mut EnhancerParams,
) -> Result<(Vec<f64>, Matrix)> {
    let (d_v, d_t, n_heads, d_k) = params.dims();
    let t = cache.s_proj.rows();
    if cache.v_in.len() != d_v
        || cache.s_in.cols() != d_t
        || cache.heads.len() != n_heads
        || cache.concat.len() != n_heads * d_k
        || cache.residual_scale.to_bits() != params.residual_scale.to_bits()
    {
        return Err(PmceError::StaleCache(
            "forward cache does not belong to these parameters".into(),
        ));
    }
    if grad_v_out.len() != d_v || grads.dims() != params.dims() {
        return Err(PmceError::DimensionMismatch("gradient buffer shape".into()));
    }
    if let Some(g) = grad_s_proj {
        if g.shape() != (t, d_v) {
            return Err(PmceError::DimensionMismatch(format!(
                "projection gradient is {:?}, expected {:?}",
                g.shape(),
                (t, d_v)
            )));
        }
    }

    let beta = params.residual_scale;
    grads.residual_scale += dot(grad_v_out, &cache.delta);
    let grad_delta: Vec<f64> = grad_v_out.iter().map(|g| beta * g).collect();
    grads.out_proj.add_outer(1.0, &cache.concat, &grad_delta);
    let grad_concat = params.out_proj.mul_vec(&grad_delta);

    let mut grad_v_in = grad_v_out.to_vec();
    let mut grad_proj = match grad_s_proj {
        Some(g) => g.clone(),
        None => Matrix::zeros(t, d_v),
    };
    let scale = 1.0 / (d_k as f64).sqrt();
    for (i, (hp, hc)) in params.heads.iter().zip(&cache.heads).enumerate() {
        let g_head = &grad_concat[i * d_k..(i + 1) * d_k];
        let g_attn = hc.values.mul_vec(g_head);
        let weighted: f64 = dot(&hc.attn, &g_attn);
        let g_logits: Vec<f64> = hc
            .attn
            .iter()
            .zip(&g_attn)
            .map(|(a, g)| a * (g - weighted))
            .collect();

        let mut g_query = vec![0.0; d_k];
        for r in 0..t {
            axpy(g_logits[r] * scale, hc.keys.row(r), &mut g_query);
        }
        grads.heads[i].query.add_outer(1.0, &cache.v_in, &g_query);
        axpy(1.0, &hp.query.mul_vec(&g_query), &mut grad_v_in);

        for r in 0..t {
            let s_row = cache.s_proj.row(r);
            let g_key: Vec<f64> = hc.query.iter().map(|q| q * g_logits[r] * scale).collect();
            grads.heads[i].key.add_outer(1.0, s_row, &g_key);
            let g_value: Vec<f64> = g_head.iter().map(|g| g * hc.attn[r]).collect();
            grads.heads[i].value.add_outer(1.0, s_row, &g_value);
            let mut back = hp.key.mul_vec(&g_key);
            axpy(1.0, &hp.value.mul_vec(&g_value), &mut back);
            axpy(1.0, &back, grad_proj.row_mut(r));
        }
    }

    let mut grad_s_in = Matrix::zeros(t, d_t);
    let n = d_v as f64;
    for r in 0..t {
        let xhat = cache.xhat.row(r);
        let g_y: Vec<f64> = grad_proj
            .row(r)
            .iter()
            .zip(cache.pre_relu.row(r))
            .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
            .collect();
        axpy(1.0, &g_y, &mut grads.ln_beta);
        let mut g_xhat = vec![0.0; d_v];
        for c in 0..d_v {
            grads.ln_gamma[c] += g_y[c] * xhat[c];
            g_xhat[c] = g_y[c] * params.ln_gamma[c];
        }
        let mean_g = g_xhat.iter().sum::<f64>() / n;
        let mean_gx = dot(&g_xhat, xhat) / n;
        let rstd = cache.rstd[r];
        let g_z: Vec<f64> = g_xhat
            .iter()
            .zip(xhat)
            .map(|(g, x)| rstd * (g - mean_g - x * mean_gx))
            .collect();
        axpy(1.0, &g_z, &mut grads.proj_bias);
        grads.proj_weight.add_outer(1.0, cache.s_in.row(r), &g_z);
        grad_s_in
            .row_mut(r)
            .copy_from_slice(&params.proj_weight.mul_vec(&g_z));
    }
    Ok((grad_v_in, grad_s_in))
}
