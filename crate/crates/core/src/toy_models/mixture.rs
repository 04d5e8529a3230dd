//! Gaussian-mixture data with closed-form diffused marginals.
//!
//! Diffusing `x_0 ~ sum_k w_k N(mu_k, Sigma_k)` to a noise level with
//! `alpha_bar = R(t)^2` gives the mixture
//! `sum_k w_k N(sqrt(alpha_bar) mu_k, alpha_bar Sigma_k + (1 - alpha_bar) I)`,
//! whose score is available exactly. The MSE-optimal noise predictor is
//! `eps*(x, t) = -sqrt(1 - alpha_bar) grad log q_t(x)`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, RwLock};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EpsilonModel;
use crate::rng::NoiseStream;
use crate::schedule::NoiseLevelMap;

/// JSON form: `{weights, means, covariances, labels?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    labels: Option<Vec<usize>>,
    chols: Vec<Cholesky<f64, Dyn>>,
}

/// One diffused component, factorized.
#[derive(Debug, Clone)]
struct MarginalComponent {
    log_weight: f64,
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

/// The diffused mixture at a fixed `alpha_bar`.
#[derive(Debug, Clone)]
pub struct MarginalMixture {
    alpha_bar: f64,
    components: Vec<MarginalComponent>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl MarginalMixture {
    /// Log density and per-component `(log responsibility numerator, C_k^{-1}(x - m_k))`.
    fn evaluate(&self, x: &DVector<f64>) -> (Vec<f64>, Vec<DVector<f64>>) {
        let mut logs = Vec::with_capacity(self.components.len());
        let mut solved = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let diff = x - &c.mean;
            let sol = c.chol.solve(&diff);
            logs.push(c.log_weight + c.log_norm - 0.5 * diff.dot(&sol));
            solved.push(sol);
        }
        (logs, solved)
    }

    pub fn alpha_bar(&self) -> f64 {
        self.alpha_bar
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let (logs, _) = self.evaluate(&DVector::from_column_slice(x));
        log_sum_exp(&logs)
    }

    /// `grad_x log q(x)`, with responsibilities normalized in the log domain.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let (logs, solved) = self.evaluate(&DVector::from_column_slice(x));
        let lse = log_sum_exp(&logs);
        let mut g = DVector::zeros(x.len());
        for (l, sol) in logs.iter().zip(&solved) {
            g -= sol * (l - lse).exp();
        }
        g.as_slice().to_vec()
    }

    /// `-sqrt(1 - alpha_bar) grad log q(x)`.
    pub fn epsilon(&self, x: &[f64]) -> Vec<f64> {
        let s = (1.0 - self.alpha_bar).sqrt();
        self.score(x).into_iter().map(|g| -s * g).collect()
    }
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<Vec<f64>>>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::Validation(
                "mixture needs at least one component".into(),
            ));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::Validation(format!(
                "{k} weights but {} means and {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != k {
                return Err(Error::Validation(format!(
                    "{k} components but {} labels",
                    l.len()
                )));
            }
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Validation("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::Validation("zero-dimensional mixture".into()));
        }
        let mut mvs = Vec::with_capacity(k);
        let mut covs = Vec::with_capacity(k);
        let mut chols = Vec::with_capacity(k);
        for (i, (m, c)) in means.into_iter().zip(covariances).enumerate() {
            if m.len() != d || c.len() != d || c.iter().any(|row| row.len() != d) {
                return Err(Error::Validation(format!(
                    "component {i} does not have dimension {d}"
                )));
            }
            let cov = DMatrix::from_fn(d, d, |r, col| c[r][col]);
            let scale = cov.amax().max(f64::MIN_POSITIVE);
            if (&cov - cov.transpose()).amax() > 1e-12 * scale {
                return Err(Error::Validation(format!(
                    "covariance {i} is not symmetric"
                )));
            }
            let eig_min = cov.clone().symmetric_eigenvalues().min();
            if !(eig_min > 0.0) {
                return Err(Error::Validation(format!(
                    "covariance {i} is not positive definite (min eigenvalue {eig_min:e})"
                )));
            }
            let chol = Cholesky::new(cov.clone()).ok_or_else(|| {
                Error::Validation(format!("covariance {i} has no Cholesky factor"))
            })?;
            mvs.push(DVector::from_vec(m));
            covs.push(cov);
            chols.push(chol);
        }
        Ok(Self {
            weights,
            means: mvs,
            covariances: covs,
            labels,
            chols,
        })
    }

    pub fn from_spec(spec: MixtureSpec) -> Result<Self> {
        Self::new(spec.weights, spec.means, spec.covariances, spec.labels)
    }

    pub fn to_spec(&self) -> MixtureSpec {
        MixtureSpec {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.as_slice().to_vec()).collect(),
            covariances: self
                .covariances
                .iter()
                .map(|c| c.row_iter().map(|r| r.iter().cloned().collect()).collect())
                .collect(),
            labels: self.labels.clone(),
        }
    }

    /// Isotropic single Gaussian `N(mean, var I)`.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        let cov = (0..d)
            .map(|i| (0..d).map(|j| if i == j { var } else { 0.0 }).collect())
            .collect();
        Self::new(vec![1.0], vec![mean], vec![cov], None)
    }

    /// Built-in data sets: `gaussian2d`, `gmm2`, `gmm3`.
    pub fn preset(name: &str) -> Result<Self> {
        let iso = |v: f64| vec![vec![v, 0.0], vec![0.0, v]];
        match name {
            "gaussian2d" => Self::isotropic(vec![0.0, 0.0], 1.0),
            "gmm2" => Self::new(
                vec![0.5, 0.5],
                vec![vec![-1.5, 0.0], vec![1.5, 0.0]],
                vec![iso(0.25), iso(0.25)],
                Some(vec![0, 1]),
            ),
            "gmm3" => {
                let r = 2.0;
                let means = (0..3)
                    .map(|i| {
                        let a = 2.0 * PI * i as f64 / 3.0;
                        vec![r * a.cos(), r * a.sin()]
                    })
                    .collect();
                Self::new(
                    vec![0.5, 0.25, 0.25],
                    means,
                    vec![iso(0.2), iso(0.3), vec![vec![0.3, 0.1], vec![0.1, 0.2]]],
                    Some(vec![0, 1, 2]),
                )
            }
            other => Err(Error::Validation(format!(
                "unknown preset {other:?} (expected gaussian2d, gmm2 or gmm3)"
            ))),
        }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Distinct labels in increasing order.
    pub fn label_set(&self) -> Vec<usize> {
        let mut l = self.labels.clone().unwrap_or_default();
        l.sort_unstable();
        l.dedup();
        l
    }

    pub fn n_classes(&self) -> usize {
        self.label_set().len()
    }

    /// The components carrying `label`, with renormalized weights.
    pub fn restrict_to_label(&self, label: usize) -> Result<Self> {
        let labels = self.require_labels()?;
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if idx.is_empty() {
            return Err(Error::Usage(format!("no component has label {label}")));
        }
        let total: f64 = idx.iter().map(|&i| self.weights[i]).sum();
        let mut weights: Vec<f64> = idx.iter().map(|&i| self.weights[i] / total).collect();
        // renormalize exactly so the sum check cannot trip on rounding
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
        Self::new(
            weights,
            idx.iter()
                .map(|&i| self.means[i].as_slice().to_vec())
                .collect(),
            idx.iter()
                .map(|&i| {
                    self.covariances[i]
                        .row_iter()
                        .map(|r| r.iter().cloned().collect())
                        .collect()
                })
                .collect(),
            Some(vec![label; idx.len()]),
        )
    }

    fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Usage("mixture has no labels".into()))
    }

    pub fn mean(&self) -> DVector<f64> {
        self.weights
            .iter()
            .zip(&self.means)
            .fold(DVector::zeros(self.dim()), |acc, (w, m)| acc + m * *w)
    }

    /// `sum_k w_k (Sigma_k + mu_k mu_k^T) - mu mu^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let d = self.dim();
        let mut c = DMatrix::zeros(d, d);
        for ((w, m), s) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            c += (s + m * m.transpose()) * *w;
        }
        c - &mu * mu.transpose()
    }

    /// Draws `n` points, row-major, with the component index of each.
    pub fn sample(&self, n: usize, stream: &mut NoiseStream) -> (Vec<f64>, Vec<usize>) {
        let d = self.dim();
        let mut out = Vec::with_capacity(n * d);
        let mut comps = Vec::with_capacity(n);
        let mut z = DVector::zeros(d);
        for _ in 0..n {
            let u = stream.uniform();
            let mut acc = 0.0;
            let mut k = self.weights.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            stream.fill_normal(z.as_mut_slice());
            let x = &self.means[k] + self.chols[k].l() * &z;
            out.extend_from_slice(x.as_slice());
            comps.push(k);
        }
        (out, comps)
    }

    /// Factorizes the diffused mixture at `alpha_bar`.
    pub fn marginal(&self, alpha_bar: f64) -> Result<MarginalMixture> {
        if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
            return Err(Error::Range {
                what: "alpha_bar",
                value: alpha_bar,
                lo: 0.0,
                hi: 1.0,
            });
        }
        let d = self.dim();
        let sa = alpha_bar.sqrt();
        let components = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.covariances)
            .map(|((w, m), s)| {
                let cov = s * alpha_bar + DMatrix::identity(d, d) * (1.0 - alpha_bar);
                let chol = Cholesky::new(cov).ok_or_else(|| Error::Numeric {
                    step: 0,
                    detail: format!("diffused covariance singular at alpha_bar = {alpha_bar}"),
                })?;
                let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                Ok(MarginalComponent {
                    log_weight: w.ln(),
                    mean: m * sa,
                    chol,
                    log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MarginalMixture {
            alpha_bar,
            components,
        })
    }

    /// Data log density `ln p(x)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.marginal(1.0)?.log_density(x))
    }

    /// Exact posterior over labels; entry `i` belongs to `label_set()[i]`.
    pub fn posterior_classifier(&self, x: &[f64]) -> Result<Vec<f64>> {
        let labels = self.require_labels()?;
        let classes = self.label_set();
        let marginal = self.marginal(1.0)?;
        let (logs, _) = marginal.evaluate(&DVector::from_column_slice(x));
        let per_class: Vec<f64> = classes
            .iter()
            .map(|c| {
                let v: Vec<f64> = logs
                    .iter()
                    .zip(labels)
                    .filter(|(_, l)| *l == c)
                    .map(|(v, _)| *v)
                    .collect();
                log_sum_exp(&v)
            })
            .collect();
        let lse = log_sum_exp(&per_class);
        Ok(per_class.iter().map(|v| (v - lse).exp()).collect())
    }
}

/// Optimal noise predictor for a mixture, `eps*(x, t)`.
pub fn analytic_epsilon(
    gm: &GaussianMixture,
    map: &NoiseLevelMap,
    x: &[f64],
    t_cont: f64,
) -> Result<Vec<f64>> {
    let alpha_bar = map.alpha_bar_at(t_cont)?;
    if !(alpha_bar < 1.0) {
        return Err(Error::Range {
            what: "alpha_bar",
            value: alpha_bar,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(gm.marginal(alpha_bar)?.epsilon(x))
}

const CACHE_LIMIT: usize = 8192;

/// [`analytic_epsilon`] as an [`EpsilonModel`], caching factorizations per step.
#[derive(Debug)]
pub struct AnalyticEpsilon {
    mixture: GaussianMixture,
    map: NoiseLevelMap,
    cache: RwLock<HashMap<u64, Arc<MarginalMixture>>>,
}

impl AnalyticEpsilon {
    pub fn new(mixture: GaussianMixture, map: NoiseLevelMap) -> Self {
        Self {
            mixture,
            map,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    fn marginal_at(&self, t: f64) -> Result<Arc<MarginalMixture>> {
        let key = t.to_bits();
        if let Some(m) = self.cache.read().unwrap().get(&key) {
            return Ok(Arc::clone(m));
        }
        let m = Arc::new(self.mixture.marginal(self.map.alpha_bar_at(t)?)?);
        let mut cache = self.cache.write().unwrap();
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, Arc::clone(&m));
        Ok(m)
    }
}

impl EpsilonModel for AnalyticEpsilon {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    /// Out-of-range steps yield NaN, which the samplers report as numeric errors.
    fn predict(&self, x: &[f64], t: f64) -> Vec<f64> {
        match self.marginal_at(t) {
            Ok(m) => m.epsilon(x),
            Err(_) => vec![f64::NAN; x.len()],
        }
    }
}
