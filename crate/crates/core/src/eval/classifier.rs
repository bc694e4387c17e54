//! Episode classifiers: multinomial logistic regression fitted on the final
//! prototypes, and nearest-prototype rules under Euclidean or cosine geometry.

use serde::{Deserialize, Serialize};

use crate::error::{PmceError, Result};
use crate::linalg::{self, argmax, dot, norm, Matrix};

pub const LR_GRAD_TOL: f64 = 1e-6;
pub const LR_MAX_ITERS: usize = 1000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ClassifierKind {
    /// Multinomial logistic regression.
    #[default]
    Lr,
    /// Euclidean nearest prototype.
    Eu,
    /// Cosine nearest prototype.
    Co,
}

impl std::fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClassifierKind::Lr => "LR",
            ClassifierKind::Eu => "EU",
            ClassifierKind::Co => "CO",
        })
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = PmceError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LR" => Ok(ClassifierKind::Lr),
            "EU" => Ok(ClassifierKind::Eu),
            "CO" => Ok(ClassifierKind::Co),
            other => Err(PmceError::InvalidConfig(format!(
                "unknown classifier `{other}`"
            ))),
        }
    }
}

/// Fitted softmax regression: `p(c | x) = softmax(W x + b)_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    /// `num_classes x d`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub iterations: usize,
    /// `||grad||_inf` of the objective at the returned iterate.
    pub grad_inf_norm: f64,
    pub converged: bool,
}

impl LogisticModel {
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut logits = self.weight.mul_vec(x);
        linalg::axpy(1.0, &self.bias, &mut logits);
        linalg::softmax(&logits)
    }

    /// Most probable class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.predict_proba(x))
    }
}

/// Objective `(1/n) sum CE + (l2/2) ||W||^2` (bias unpenalised) and its gradient.
fn objective_grad(
    w: &Matrix,
    b: &[f64],
    xs: &[Vec<f64>],
    ys: &[usize],
    l2: f64,
) -> (f64, Matrix, Vec<f64>) {
    let n = xs.len() as f64;
    let mut gw = w.clone();
    gw.as_mut_slice().iter_mut().for_each(|v| *v *= l2);
    let mut gb = vec![0.0; b.len()];
    let mut loss = 0.5 * l2 * dot(w.as_slice(), w.as_slice());
    for (x, &y) in xs.iter().zip(ys) {
        let mut logits = w.mul_vec(x);
        linalg::axpy(1.0, b, &mut logits);
        let p = linalg::softmax(&logits);
        loss -= p[y].max(f64::MIN_POSITIVE).ln() / n;
        for (c, pc) in p.iter().enumerate() {
            let r = (pc - if c == y { 1.0 } else { 0.0 }) / n;
            linalg::axpy(r, x, gw.row_mut(c));
            gb[c] += r;
        }
    }
    (loss, gw, gb)
}

fn inf_norm(gw: &Matrix, gb: &[f64]) -> f64 {
    gw.as_slice()
        .iter()
        .chain(gb)
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Full-batch accelerated gradient descent from zero, with adaptive restart.
///
/// Stops when `||grad||_inf < 1e-6` or after 1000 iterations; the last
/// iterate is returned either way and `converged` records which.
pub fn fit_logistic(
    points: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    l2: f64,
) -> Result<LogisticModel> {
    if points.is_empty() || points.len() != labels.len() {
        return Err(PmceError::InsufficientData(format!(
            "logistic regression got {} points and {} labels",
            points.len(),
            labels.len()
        )));
    }
    if num_classes < 2 {
        return Err(PmceError::InsufficientData(
            "logistic regression needs at least two classes".into(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(PmceError::IndexOutOfRange {
            context: "logistic label".into(),
            index: bad,
            len: num_classes,
        });
    }
    if l2.is_nan() || l2 <= 0.0 {
        return Err(PmceError::InvalidConfig(format!(
            "l2 must be positive, got {l2}"
        )));
    }
    let d = points[0].len();
    // Softmax cross-entropy curvature is at most 1/2 per unit of ||(x, 1)||^2.
    let max_sq = points.iter().map(|x| dot(x, x) + 1.0).fold(0.0, f64::max);
    let step = 1.0 / (0.5 * max_sq + l2);

    let mut w = Matrix::zeros(num_classes, d);
    let mut b = vec![0.0; num_classes];
    let mut w_prev = w.clone();
    let mut b_prev = b.clone();
    let mut momentum_t = 1.0f64;
    let mut last_loss = f64::INFINITY;

    for iter in 0..LR_MAX_ITERS {
        // Extrapolated point y = x + ((t_prev - 1) / t) (x - x_prev).
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum_t * momentum_t).sqrt());
        let coef = (momentum_t - 1.0) / t_next;
        let yw = Matrix::from_vec(
            num_classes,
            d,
            w.as_slice()
                .iter()
                .zip(w_prev.as_slice())
                .map(|(a, p)| a + coef * (a - p))
                .collect(),
        );
        let yb: Vec<f64> = b
            .iter()
            .zip(&b_prev)
            .map(|(a, p)| a + coef * (a - p))
            .collect();

        let (_, gw, gb) = objective_grad(&yw, &yb, points, labels, l2);
        let g_inf = inf_norm(&gw, &gb);
        if g_inf < LR_GRAD_TOL {
            return Ok(LogisticModel {
                weight: yw,
                bias: yb,
                iterations: iter,
                grad_inf_norm: g_inf,
                converged: true,
            });
        }
        let mut nw = yw.clone();
        linalg::axpy(-step, gw.as_slice(), nw.as_mut_slice());
        let mut nb = yb.clone();
        linalg::axpy(-step, &gb, &mut nb);

        let (loss, _, _) = objective_grad(&nw, &nb, points, labels, l2);
        w_prev = std::mem::replace(&mut w, nw);
        b_prev = std::mem::replace(&mut b, nb);
        if loss > last_loss {
            // Function-value restart: drop the momentum.
            momentum_t = 1.0;
            w_prev = w.clone();
            b_prev = b.clone();
        } else {
            momentum_t = t_next;
        }
        last_loss = loss;
    }
    let (_, gw, gb) = objective_grad(&w, &b, points, labels, l2);
    let g_inf = inf_norm(&gw, &gb);
    Ok(LogisticModel {
        weight: w,
        bias: b,
        iterations: LR_MAX_ITERS,
        grad_inf_norm: g_inf,
        converged: g_inf < LR_GRAD_TOL,
    })
}

/// Fits one training point per class (labels `0..N`) and predicts every query.
pub fn classify_lr<R: AsRef<[f64]>>(
    prototypes: &[Vec<f64>],
    queries: &[R],
    l2: f64,
) -> Result<(Vec<usize>, LogisticModel)> {
    let labels: Vec<usize> = (0..prototypes.len()).collect();
    let model = fit_logistic(prototypes, &labels, prototypes.len(), l2)?;
    let preds = queries.iter().map(|q| model.predict(q.as_ref())).collect();
    Ok((preds, model))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NearestMetric {
    Euclidean,
    Cosine,
}

/// Nearest prototype per query; ties go to the lowest class index.
pub fn classify_nearest<R: AsRef<[f64]>>(
    prototypes: &[Vec<f64>],
    queries: &[R],
    metric: NearestMetric,
) -> Result<Vec<usize>> {
    if prototypes.is_empty() {
        return Err(PmceError::InsufficientData("no prototypes".into()));
    }
    let proto_norms: Vec<f64> = prototypes.iter().map(|p| norm(p)).collect();
    if metric == NearestMetric::Cosine {
        if let Some(c) = proto_norms.iter().position(|n| *n == 0.0) {
            return Err(PmceError::ZeroNorm(format!("prototype {c}")));
        }
    }
    queries
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            let q = q.as_ref();
            let scores: Vec<f64> = match metric {
                NearestMetric::Euclidean => {
                    prototypes.iter().map(|p| -linalg::sq_dist(p, q)).collect()
                }
                NearestMetric::Cosine => {
                    let qn = norm(q);
                    if qn == 0.0 {
                        return Err(PmceError::ZeroNorm(format!("query {qi}")));
                    }
                    prototypes
                        .iter()
                        .zip(&proto_norms)
                        .map(|(p, pn)| dot(p, q) / (pn * qn))
                        .collect()
                }
            };
            Ok(argmax(&scores))
        })
        .collect()
}
