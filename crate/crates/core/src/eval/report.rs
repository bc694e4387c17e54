use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{PmceError, Result};

/// Normal quantile used for the reported interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    pub mean: f64,
    pub std: f64,
    pub ci95_half_width: f64,
}

impl Summary {
    /// `"63.42 ± 0.81"` in percent.
    pub fn percent_string(&self) -> String {
        format!(
            "{:.2} ± {:.2}",
            100.0 * self.mean,
            100.0 * self.ci95_half_width
        )
    }
}

/// Mean and `1.96 * s / sqrt(E)` with the Bessel-corrected sample deviation.
pub fn aggregate_report(accuracies: &[f64]) -> Result<Summary> {
    let e = accuracies.len();
    if e < 2 {
        return Err(PmceError::InsufficientData(format!(
            "a confidence interval needs at least 2 episodes, got {e}"
        )));
    }
    if let Some(i) = accuracies.iter().position(|a| !a.is_finite()) {
        return Err(PmceError::NonFinite {
            context: "episode accuracy".into(),
            index: i,
        });
    }
    let n = e as f64;
    // Shifting by the first value keeps constant inputs exact.
    let shift = accuracies[0];
    let mean = shift + accuracies.iter().map(|a| a - shift).sum::<f64>() / n;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    Ok(Summary {
        episodes: e,
        mean,
        std,
        ci95_half_width: Z_95 * std / n.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub std_diff: f64,
    pub t: f64,
    /// Two-sided p-value under Student's t with `n - 1` degrees of freedom.
    pub p_value: f64,
}

/// Paired t-test of `treatment - control` over matched episodes.
pub fn paired_t_test(treatment: &[f64], control: &[f64]) -> Result<PairedTest> {
    if treatment.len() != control.len() {
        return Err(PmceError::DimensionMismatch(format!(
            "paired samples of length {} and {}",
            treatment.len(),
            control.len()
        )));
    }
    let diffs: Vec<f64> = treatment.iter().zip(control).map(|(a, b)| a - b).collect();
    let s = aggregate_report(&diffs)?;
    let n = diffs.len() as f64;
    let (t, p_value) = if s.std == 0.0 {
        // Every difference is identical: either no effect at all or a certain one.
        if s.mean == 0.0 {
            (0.0, 1.0)
        } else {
            (s.mean.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = s.mean / (s.std / n.sqrt());
        let dist = StudentsT::new(0.0, 1.0, n - 1.0)
            .map_err(|e| PmceError::InvalidConfig(e.to_string()))?;
        (t, 2.0 * dist.cdf(-t.abs()))
    };
    Ok(PairedTest {
        n: diffs.len(),
        mean_diff: s.mean,
        std_diff: s.std,
        t,
        p_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn interval_examples() {
        let s = aggregate_report(&[0.6; 10]).unwrap();
        assert_eq!(s.ci95_half_width, 0.0);
        let s = aggregate_report(&[0.8, 1.0]).unwrap();
        assert_abs_diff_eq!(s.mean, 0.9, epsilon = 1e-15);
        let oracle = 1.96 * (0.02f64).sqrt() / 2f64.sqrt();
        assert_abs_diff_eq!(s.ci95_half_width, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(s.ci95_half_width, 0.196, epsilon = 1e-5);
        assert!(aggregate_report(&[0.5]).is_err());
    }

    #[test]
    fn mean_within_range() {
        let a = [0.2, 0.9, 0.4, 0.4, 0.7];
        let s = aggregate_report(&a).unwrap();
        assert!((0.2..=0.9).contains(&s.mean));
    }

    #[test]
    fn paired_test_reference_value() {
        // diffs 1, 2, 3, 4: mean 2.5, s = 1.290994, t = 3.872983, df 3.
        let t = paired_t_test(&[2.0, 4.0, 6.0, 8.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(t.t, 2.5 / (1.2909944487358056 / 2.0), epsilon = 1e-12);
        // Closed-form t(3) CDF: F(t) = 1/2 + (1/pi)[atan(u) + u/(1+u^2)], u = t/sqrt(3).
        let u = t.t / 3f64.sqrt();
        let upper = 0.5 - (u.atan() + u / (1.0 + u * u)) / std::f64::consts::PI;
        assert_abs_diff_eq!(t.p_value, 2.0 * upper, epsilon = 1e-10);
    }

    #[test]
    fn paired_test_degenerate() {
        assert_eq!(
            paired_t_test(&[0.5, 0.6], &[0.5, 0.6]).unwrap().p_value,
            1.0
        );
        assert_eq!(
            paired_t_test(&[0.6, 0.7], &[0.5, 0.6]).unwrap().p_value,
            0.0
        );
    }
}
