//! Sample-quality metrics on raw coordinates: Fréchet distance, an
//! Inception-Score analog over classifier probabilities, and accuracy.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues of the inner product matrix down to this are treated as zero.
pub const SQRTM_NEGATIVE_TOLERANCE: f64 = 1e-10;

/// Tolerance on probability-row sums.
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

/// Mean and covariance of a Gaussian fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Moments {
    /// Sample mean and unbiased (`n - 1`) covariance of row-major `samples`.
    pub fn from_samples(samples: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || !samples.len().is_multiple_of(dim) {
            return Err(Error::Validation(format!(
                "{} values do not form rows of dimension {dim}",
                samples.len()
            )));
        }
        let n = samples.len() / dim;
        if n < dim + 1 {
            return Err(Error::InsufficientData {
                needed: dim + 1,
                got: n,
            });
        }
        let x = DMatrix::from_row_slice(n, dim, samples);
        let mean = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok(Self { mean, cov })
    }
}

/// Symmetric positive semi-definite square root via eigendecomposition.
///
/// Eigenvalues in `[-1e-10, 0)` are clamped to zero; anything more negative
/// is a numeric error.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -SQRTM_NEGATIVE_TOLERANCE || !v.is_finite() {
            return Err(Error::Numeric {
                step: 0,
                detail: format!("matrix square root of a matrix with eigenvalue {v}"),
            });
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2})`.
pub fn frechet_from_moments(a: &Moments, b: &Moments) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.cov.shape() != (d, d) || b.cov.shape() != (d, d) {
        return Err(Error::Validation("moment dimensions disagree".into()));
    }
    let root_a = sqrtm_psd(&a.cov)?;
    let inner = &root_a * &b.cov * &root_a;
    let cross = sqrtm_psd(&inner)?;
    let mean_term = (&a.mean - &b.mean).norm_squared();
    Ok(mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace())
}

/// Fréchet distance between the Gaussian fits of two row-major sample sets.
pub fn frechet_distance(x_t: &[f64], x_g: &[f64], dim: usize) -> Result<f64> {
    let a = Moments::from_samples(x_t, dim)?;
    let b = Moments::from_samples(x_g, dim)?;
    frechet_from_moments(&a, &b)
}

fn check_probs(probs: &[Vec<f64>]) -> Result<usize> {
    let k = probs.first().map(Vec::len).unwrap_or(0);
    if k == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    for (i, row) in probs.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.len() != k
            || row.iter().any(|p| !(*p >= 0.0) || !p.is_finite())
            || (sum - 1.0).abs() > PROB_SUM_TOLERANCE
        {
            return Err(Error::Validation(format!(
                "row {i} is not a probability vector over {k} classes"
            )));
        }
    }
    Ok(k)
}

/// `exp(mean_i KL(p_i || mean_j p_j))` with `0 log 0 = 0`.
pub fn inception_score(probs: &[Vec<f64>]) -> Result<f64> {
    let k = check_probs(probs)?;
    let n = probs.len() as f64;
    let mut marginal = vec![0.0; k];
    for row in probs {
        for (m, p) in marginal.iter_mut().zip(row) {
            *m += p / n;
        }
    }
    let mean_kl = probs
        .iter()
        .map(|row| {
            row.iter()
                .zip(&marginal)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, m)| p * (p / m).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    Ok(mean_kl.exp())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} rows but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(row, l)| argmax(row) == **l)
        .count();
    Ok(hits as f64 / probs.len() as f64)
}

/// Version tag of the metric CSV layout.
pub const METRIC_CSV_SCHEMA: &str = "fastdpm-metrics/1";

/// Metrics of one sampling cell plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Schedule kind, or `FULL` for the full-length sampler.
    pub kind: String,
    #[serde(rename = "S")]
    pub len: usize,
    pub sampler: String,
    pub kappa: f64,
    pub seed: u64,
    pub n_generated: usize,
    pub n_reference: usize,
    pub frechet: Option<f64>,
    pub inception_score: Option<f64>,
    pub accuracy: Option<f64>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "kind,S,sampler,kappa,seed,n_generated,n_reference,frechet,inception_score,accuracy";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.10e}")).unwrap_or_default();
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            self.kind,
            self.len,
            self.sampler,
            self.kappa,
            self.seed,
            self.n_generated,
            self.n_reference,
            opt(self.frechet),
            opt(self.inception_score),
            opt(self.accuracy)
        )
        .unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iso(d: usize, mean: f64, var: f64) -> Moments {
        Moments {
            mean: DVector::from_element(d, mean),
            cov: DMatrix::identity(d, d) * var,
        }
    }

    #[test]
    fn closed_forms() {
        for d in 1..=5 {
            let shifted = Moments {
                mean: DVector::from_fn(d, |i, _| i as f64 - 1.0),
                cov: DMatrix::identity(d, d),
            };
            let m2 = shifted.mean.norm_squared();
            assert!(
                (frechet_from_moments(&iso(d, 0.0, 1.0), &shifted).unwrap() - m2).abs() < 1e-12
            );
            let f = frechet_from_moments(&iso(d, 0.0, 1.0), &iso(d, 0.0, 4.0)).unwrap();
            assert!((f - d as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_sets_are_zero() {
        let xs: Vec<f64> = (0..40).map(|i| ((i * 37 % 11) as f64).sin()).collect();
        assert!(frechet_distance(&xs, &xs, 2).unwrap().abs() < 1e-10);
    }

    #[test]
    fn too_few_samples() {
        let xs = vec![0.0, 1.0, 2.0, 3.0];
        assert!(matches!(
            frechet_distance(&xs, &xs, 2),
            Err(Error::InsufficientData { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn sqrtm_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-6]);
        assert!(sqrtm_psd(&m).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        let r = sqrtm_psd(&m).unwrap();
        assert_eq!(r[(1, 1)], 0.0);
    }

    #[test]
    fn inception_examples() {
        let uniform = vec![vec![0.25; 4]; 10];
        assert!((inception_score(&uniform).unwrap() - 1.0).abs() < 1e-12);
        let one_hot: Vec<Vec<f64>> = (0..12)
            .map(|i| (0..3).map(|k| if i % 3 == k { 1.0 } else { 0.0 }).collect())
            .collect();
        assert!((inception_score(&one_hot).unwrap() - 3.0).abs() < 1e-12);
        let same = vec![vec![0.7, 0.2, 0.1]; 5];
        assert!((inception_score(&same).unwrap() - 1.0).abs() < 1e-12);
        assert!(inception_score(&[vec![0.5, 0.6]]).is_err());
        assert!(inception_score(&[vec![1.5, -0.5]]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let probs = vec![
            vec![0.9, 0.1],
            vec![0.2, 0.8],
            vec![0.5, 0.5],
            vec![0.4, 0.6],
        ];
        assert_eq!(accuracy(&probs, &[0, 1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&probs, &[1, 0, 1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&probs, &[0, 0, 0, 0]).unwrap(), 0.5);
        assert!(accuracy(&probs, &[0]).is_err());
    }

    #[test]
    fn report_csv_has_header_arity() {
        let r = MetricReport {
            kind: "STEP_LINEAR".into(),
            len: 10,
            sampler: "ddpm_rev".into(),
            kappa: 1.0,
            seed: 3,
            n_generated: 100,
            n_reference: 100,
            frechet: Some(0.5),
            inception_score: None,
            accuracy: Some(1.0),
        };
        assert_eq!(
            r.csv_row().split(',').count(),
            MetricReport::CSV_HEADER.split(',').count()
        );
    }
}
