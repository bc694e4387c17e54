//! Training losses for the enhancer: cross-entropy through an auxiliary
//! base-class classifier, an L1 anchor to the frozen class means, and a
//! supervised contrastive term on projected caption embeddings.
//!
//! Every loss returns its value together with the gradient w.r.t. its input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PmceError, Result};
use crate::linalg::{self, dot, norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_con: f64,
    pub tau_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_con: 1.0,
            tau_c: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rec >= 0.0 && self.lambda_con >= 0.0 && self.tau_c > 0.0) {
            return Err(PmceError::InvalidConfig(format!(
                "loss weights must be non-negative and tau_c positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Linear head over enhanced features: `logits = v W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    /// `d_v x num_classes`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ClassifierParams {
    pub fn zeros(d_v: usize, num_classes: usize) -> Self {
        Self {
            weight: Matrix::zeros(d_v, num_classes),
            bias: vec![0.0; num_classes],
        }
    }

    /// Fan-based uniform weights, zero bias.
    pub fn init(d_v: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (6.0 / (d_v + num_classes) as f64).sqrt();
        let data = (0..d_v * num_classes)
            .map(|_| rng.random_range(-a..=a))
            .collect();
        Self {
            weight: Matrix::from_vec(d_v, num_classes, data),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.weight.vec_mul(v);
        linalg::axpy(1.0, &self.bias, &mut out);
        out
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        vec![
            ("classifier.weight".into(), self.weight.as_slice()),
            ("classifier.bias".into(), &self.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("classifier.weight".into(), self.weight.as_mut_slice()),
            ("classifier.bias".into(), &mut self.bias),
        ]
    }
}

/// Mean negative log-likelihood of `labels` under row-wise softmax.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, c) = logits.shape();
    if labels.len() != b || b == 0 {
        return Err(PmceError::DimensionMismatch(format!(
            "{} labels for {b} logit rows",
            labels.len()
        )));
    }
    let mut grad = Matrix::zeros(b, c);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(PmceError::IndexOutOfRange {
                context: "cross-entropy label".into(),
                index: y,
                len: c,
            });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let g = grad.row_mut(i);
        for (gj, l) in g.iter_mut().zip(row) {
            *gj = (l - lse).exp() / b as f64;
        }
        g[y] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, grad))
}

/// Mean L1 distance of each row to its class mean. Subgradient uses `sign(0) = 0`.
pub fn rec_loss(v_out: &Matrix, labels: &[usize], class_means: &Matrix) -> Result<(f64, Matrix)> {
    let (b, d) = v_out.shape();
    if labels.len() != b || b == 0 || class_means.cols() != d {
        return Err(PmceError::DimensionMismatch(format!(
            "rec_loss: {b}x{d} outputs, {} labels, means width {}",
            labels.len(),
            class_means.cols()
        )));
    }
    let mut grad = Matrix::zeros(b, d);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= class_means.rows() {
            return Err(PmceError::IndexOutOfRange {
                context: "rec_loss class mean".into(),
                index: y,
                len: class_means.rows(),
            });
        }
        for (c, (v, m)) in v_out.row(i).iter().zip(class_means.row(y)).enumerate() {
            let diff = v - m;
            loss += diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad.set(i, c, sign / b as f64);
        }
    }
    Ok((loss / b as f64, grad))
}

/// Supervised contrastive loss over L2-normalised rows at temperature `tau_c`.
///
/// Anchors without an in-batch positive contribute zero but still count in
/// the `1/B` average.
pub fn supcon_loss(inputs: &Matrix, labels: &[usize], tau_c: f64) -> Result<(f64, Matrix)> {
    let (b, d) = inputs.shape();
    if b < 2 || labels.len() != b {
        return Err(PmceError::DimensionMismatch(format!(
            "supcon needs B >= 2 rows with labels, got {b} rows and {} labels",
            labels.len()
        )));
    }
    if tau_c.is_nan() || tau_c <= 0.0 {
        return Err(PmceError::InvalidConfig(format!(
            "tau_c must be positive, got {tau_c}"
        )));
    }
    let norms: Vec<f64> = inputs.iter_rows().map(norm).collect();
    if let Some(i) = norms.iter().position(|n| *n == 0.0) {
        return Err(PmceError::ZeroNorm(format!("contrastive input row {i}")));
    }
    let mut unit = inputs.clone();
    for (i, n) in norms.iter().enumerate() {
        unit.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }

    let mut loss = 0.0;
    let mut grad_unit = Matrix::zeros(b, d);
    let bf = b as f64;
    for i in 0..b {
        let positives: Vec<usize> = (0..b)
            .filter(|&p| p != i && labels[p] == labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let others: Vec<usize> = (0..b).filter(|&a| a != i).collect();
        let sims: Vec<f64> = others
            .iter()
            .map(|&a| dot(unit.row(i), unit.row(a)) / tau_c)
            .collect();
        let probs = linalg::softmax(&sims);
        let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + sims.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        let np = positives.len() as f64;
        let pos_sum: f64 = positives
            .iter()
            .map(|&p| dot(unit.row(i), unit.row(p)) / tau_c)
            .sum();
        loss += lse - pos_sum / np;

        // dl_i/ds_ia = softmax_a - [a in P(i)] / |P(i)|, with s_ia = u_i . u_a / tau_c.
        for (slot, &a) in others.iter().enumerate() {
            let mut coeff = probs[slot];
            if labels[a] == labels[i] {
                coeff -= 1.0 / np;
            }
            let c = coeff / (tau_c * bf);
            let ua = unit.row(a).to_vec();
            let ui = unit.row(i).to_vec();
            linalg::axpy(c, &ua, grad_unit.row_mut(i));
            linalg::axpy(c, &ui, grad_unit.row_mut(a));
        }
    }

    let mut grad = Matrix::zeros(b, d);
    for i in 0..b {
        let u = unit.row(i);
        let gu = grad_unit.row(i);
        let radial = dot(u, gu);
        for (c, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = (gu[c] - u[c] * radial) / norms[i];
        }
    }
    Ok((loss / bf, grad))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub rec: f64,
    pub con: f64,
}

pub fn total_loss(components: &LossComponents, weights: &LossWeights) -> f64 {
    components.cls + weights.lambda_rec * components.rec + weights.lambda_con * components.con
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64, h: f64) -> Matrix {
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for k in 0..x.as_slice().len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[k] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[k] -= h;
            g.as_mut_slice()[k] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = cross_entropy(&Matrix::from_rows(&[[0.3; 5]]), &[2]).unwrap();
        assert_abs_diff_eq!(l, 5f64.ln(), epsilon = 1e-12);
        let (l, _) = cross_entropy(&Matrix::from_rows(&[[2.0, 0.0]]), &[0]).unwrap();
        assert_abs_diff_eq!(l, 0.126928, epsilon = 1e-6);
        assert!(cross_entropy(&Matrix::from_rows(&[[2.0, 0.0]]), &[2]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let logits = Matrix::from_rows(&[[0.2, -1.0, 0.7], [1.5, 0.1, -0.3]]);
        let labels = [2, 0];
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        let n = numeric_grad(&logits, |x| cross_entropy(x, &labels).unwrap().0, 1e-5);
        assert!(max_rel_err(&g, &n) < 1e-6, "{}", max_rel_err(&g, &n));
    }

    #[test]
    fn rec_loss_examples() {
        let means = Matrix::from_rows(&[[1.0, 1.0], [0.0, 0.0]]);
        let (l, g) = rec_loss(&Matrix::from_rows(&[[1.0, 1.0]]), &[0], &means).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
        let (l, g) = rec_loss(&Matrix::from_rows(&[[1.0, -2.0]]), &[1], &means).unwrap();
        assert_eq!(l, 3.0);
        assert_eq!(g.as_slice(), &[1.0, -1.0]);
        let (l2, _) = rec_loss(&Matrix::from_rows(&[[2.5, -5.0]]), &[1], &means).unwrap();
        assert_abs_diff_eq!(l2, 2.5 * l, epsilon = 1e-12);
        assert!(rec_loss(&Matrix::from_rows(&[[1.0, 1.0]]), &[2], &means).is_err());
    }

    #[test]
    fn supcon_examples() {
        let same = Matrix::from_rows(&[[0.3, 0.4], [0.3, 0.4]]);
        let (l, _) = supcon_loss(&same, &[1, 1], 0.1).unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-12);

        let four = Matrix::from_rows(&[[1.0, 2.0, 3.0]; 4]);
        let (l, _) = supcon_loss(&four, &[0; 4], 0.1).unwrap();
        assert_abs_diff_eq!(l, 3f64.ln(), epsilon = 1e-9);

        let singles = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let (l, g) = supcon_loss(&singles, &[0, 1, 2], 0.1).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.as_slice().iter().all(|v| *v == 0.0));

        let zero = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(
            supcon_loss(&zero, &[0, 0], 0.1),
            Err(PmceError::ZeroNorm(_))
        ));
    }

    #[test]
    fn supcon_gradient_matches_differences() {
        let x = Matrix::from_rows(&[
            [0.5, -0.2, 0.9, 0.1],
            [0.4, 0.3, -0.7, 0.2],
            [-0.6, 0.8, 0.1, 0.5],
            [0.2, 0.2, 0.3, -0.9],
            [1.1, -0.4, 0.0, 0.3],
        ]);
        let labels = [0, 1, 0, 1, 2];
        let (_, g) = supcon_loss(&x, &labels, 0.5).unwrap();
        let n = numeric_grad(&x, |m| supcon_loss(m, &labels, 0.5).unwrap().0, 1e-5);
        assert!(max_rel_err(&g, &n) < 1e-6, "{}", max_rel_err(&g, &n));
    }

    #[test]
    fn supcon_ignores_row_scale() {
        let x = Matrix::from_rows(&[[0.5, -0.2, 0.9], [0.4, 0.3, -0.7], [-0.6, 0.8, 0.1]]);
        let mut scaled = x.clone();
        scaled.row_mut(1).iter_mut().for_each(|v| *v *= 7.5);
        let labels = [0, 0, 1];
        let (a, _) = supcon_loss(&x, &labels, 0.1).unwrap();
        let (b, _) = supcon_loss(&scaled, &labels, 0.1).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let c = LossComponents {
            cls: 1.0,
            rec: 2.0,
            con: 3.0,
        };
        assert_eq!(total_loss(&c, &LossWeights::default()), 6.0);
        let off = LossWeights {
            lambda_rec: 0.0,
            lambda_con: 0.0,
            tau_c: 0.1,
        };
        assert_eq!(total_loss(&c, &off), 1.0);
        let w = LossWeights {
            lambda_rec: 0.5,
            lambda_con: 2.0,
            tau_c: 0.1,
        };
        let doubled = LossComponents { rec: 4.0, ..c };
        assert_abs_diff_eq!(total_loss(&doubled, &w) - total_loss(&c, &w), 0.5 * 2.0);
    }
}
