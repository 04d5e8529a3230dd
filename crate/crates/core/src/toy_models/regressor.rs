//! A small MLP noise predictor trained on the simple noise-regression loss
//! `E ||eps - eps_theta(sqrt(alpha_bar) x_0 + sqrt(1 - alpha_bar) eps, t)||^2`.
//!
//! Inputs are `x` concatenated with `t / T`; hidden layers use SiLU. The
//! gradient is computed by a hand-written reverse pass over the fixed
//! architecture.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::mixture::GaussianMixture;
use crate::error::{Error, Result};
use crate::model::EpsilonModel;
use crate::rng::{derive_seed, NoiseStream};
use crate::schedule::NoiseLevelMap;

const FORMAT: &str = "fastdpm-regressor/1";

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    /// `out x in`
    w: DMatrix<f64>,
    b: DVector<f64>,
}

/// Metadata sidecar of a saved regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorMeta {
    pub format: String,
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub activation: String,
    /// Steps are divided by this before entering the network.
    pub t_scale: f64,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyRegressor {
    dim: usize,
    hidden: Vec<usize>,
    t_scale: f64,
    layers: Vec<Layer>,
}

/// Activations kept for the reverse pass.
struct Tape {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl ToyRegressor {
    /// Gaussian init with variance `1 / fan_in`; the output layer starts at zero.
    pub fn new(dim: usize, hidden: &[usize], t_scale: f64, stream: &mut NoiseStream) -> Self {
        let mut widths = vec![dim + 1];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = if i + 1 == n {
                    0.0
                } else {
                    1.0 / (fan_in as f64).sqrt()
                };
                Layer {
                    w: DMatrix::from_fn(fan_out, fan_in, |_, _| scale * stream.normal()),
                    b: DVector::zeros(fan_out),
                }
            })
            .collect();
        Self {
            dim,
            hidden: hidden.to_vec(),
            t_scale,
            layers,
        }
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn meta(&self) -> RegressorMeta {
        RegressorMeta {
            format: FORMAT.into(),
            dim: self.dim,
            hidden: self.hidden.clone(),
            activation: "silu".into(),
            t_scale: self.t_scale,
            param_count: self.param_count(),
        }
    }

    /// Parameters flattened layer by layer: weights row-major, then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for r in 0..l.w.nrows() {
                out.extend(l.w.row(r).iter());
            }
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Validation(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for r in 0..l.w.nrows() {
                for c in 0..l.w.ncols() {
                    l.w[(r, c)] = it.next().unwrap();
                }
            }
            for v in l.b.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        Ok(())
    }

    /// Writes `<stem>.bin` (little-endian f64 parameters) and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.params().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(stem.with_extension("bin"), bytes)?;
        fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&self.meta())?,
        )?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let meta: RegressorMeta =
            serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
        if meta.format != FORMAT || meta.activation != "silu" {
            return Err(Error::Validation(format!(
                "unsupported regressor format {} / {}",
                meta.format, meta.activation
            )));
        }
        let bytes = fs::read(stem.with_extension("bin"))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Validation(
                "parameter file is not a whole number of f64".into(),
            ));
        }
        let params: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut stream = NoiseStream::new(0, 0);
        let mut model = Self::new(meta.dim, &meta.hidden, meta.t_scale, &mut stream);
        model.set_params(&params)?;
        Ok(model)
    }

    fn features(&self, xs: &[f64], ts: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        DMatrix::from_fn(d + 1, ts.len(), |r, c| {
            if r < d {
                xs[c * d + r]
            } else {
                ts[c] / self.t_scale
            }
        })
    }

    fn forward(&self, input: DMatrix<f64>, tape: Option<&mut Tape>) -> DMatrix<f64> {
        let n = self.layers.len();
        let mut a = input;
        let mut tape = tape;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.w * &a;
            for mut col in z.column_iter_mut() {
                col += &l.b;
            }
            let next = if i + 1 < n { z.map(silu) } else { z.clone() };
            if let Some(t) = tape.as_deref_mut() {
                t.inputs.push(a);
                t.pre.push(z);
            }
            a = next;
        }
        a
    }

    /// Predictions for a row-major batch `xs` (`ts.len() x dim`), row-major.
    pub fn predict_batch(&self, xs: &[f64], ts: &[f64]) -> Vec<f64> {
        let out = self.forward(self.features(xs, ts), None);
        out.as_slice().to_vec()
    }

    /// Mean squared error `(1/B) sum_b ||target_b - out_b||^2` and its gradient.
    fn loss_and_grad(&self, xs: &[f64], ts: &[f64], targets: &[f64]) -> (f64, Vec<Layer>) {
        let batch = ts.len();
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let out = self.forward(self.features(xs, ts), Some(&mut tape));
        let target = DMatrix::from_column_slice(self.dim, batch, targets);
        let resid = &out - target;
        let loss = resid.norm_squared() / batch as f64;

        let mut delta = resid * (2.0 / batch as f64);
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let gw = &delta * tape.inputs[i].transpose();
            let gb = delta.column_sum();
            if i > 0 {
                let mut back = self.layers[i].w.transpose() * &delta;
                back.zip_apply(&tape.pre[i - 1], |g, z| *g *= silu_grad(z));
                delta = back;
            }
            grads.push(Layer { w: gw, b: gb });
        }
        grads.reverse();
        (loss, grads)
    }

    /// Loss and flattened gradient, in the order of [`Self::params`].
    pub fn loss_gradient(&self, xs: &[f64], ts: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
        let (loss, grads) = self.loss_and_grad(xs, ts, targets);
        let mut flat = Vec::with_capacity(self.param_count());
        for g in &grads {
            for r in 0..g.w.nrows() {
                flat.extend(g.w.row(r).iter());
            }
            flat.extend(g.b.iter());
        }
        (loss, flat)
    }

    pub fn loss(&self, xs: &[f64], ts: &[f64], targets: &[f64]) -> f64 {
        let out = self.predict_batch(xs, ts);
        out.iter()
            .zip(targets)
            .map(|(o, t)| (o - t).powi(2))
            .sum::<f64>()
            / ts.len() as f64
    }
}

impl EpsilonModel for ToyRegressor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.predict_batch(x, &[t])
    }
}

/// Hyperparameters of [`train_toy_regressor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// The learning rate decays linearly to `learning_rate * final_lr_fraction`.
    pub final_lr_fraction: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub seed: u64,
    /// Draw integer steps uniformly from `1..=T` instead of continuous `(0, T]`.
    pub discrete_t: bool,
    /// Size of the held-out set used for the reported objective.
    pub eval_size: usize,
    /// Record the training loss every this many iterations.
    pub log_every: usize,
    /// A training loss above this (or non-finite) aborts as diverged.
    pub max_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            iterations: 20_000,
            batch_size: 256,
            learning_rate: 0.02,
            momentum: 0.9,
            final_lr_fraction: 0.05,
            grad_clip: 5.0,
            seed: 0,
            discrete_t: false,
            eval_size: 8192,
            log_every: 100,
            max_loss: 1e6,
        }
    }
}

/// A noisy training/evaluation batch `(x_t, t, eps)`.
#[derive(Debug, Clone)]
pub struct NoisyBatch {
    pub xs: Vec<f64>,
    pub ts: Vec<f64>,
    pub eps: Vec<f64>,
}

/// Draws `n` triples with `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps`.
pub fn noisy_batch(
    gm: &GaussianMixture,
    map: &NoiseLevelMap,
    n: usize,
    discrete_t: bool,
    stream: &mut NoiseStream,
) -> Result<NoisyBatch> {
    let steps = map.schedule().steps();
    let d = gm.dim();
    let (x0, _) = gm.sample(n, stream);
    let mut xs = Vec::with_capacity(n * d);
    let mut ts = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n * d);
    for i in 0..n {
        let t = if discrete_t {
            ((stream.uniform() * steps as f64) as usize + 1).min(steps) as f64
        } else {
            // (0, T]
            (1.0 - stream.uniform()) * steps as f64
        };
        let ab = map.alpha_bar_at(t)?;
        let (s, n_s) = (ab.sqrt(), (1.0 - ab).sqrt());
        for k in 0..d {
            let e = stream.normal();
            xs.push(s * x0[i * d + k] + n_s * e);
            eps.push(e);
        }
        ts.push(t);
    }
    Ok(NoisyBatch { xs, ts, eps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(iteration, training loss)` pairs.
    pub trace: Vec<(usize, f64)>,
    pub initial_heldout: f64,
    pub final_heldout: f64,
}

/// Fits a [`ToyRegressor`] with momentum SGD on the noise-regression loss.
pub fn train_toy_regressor(
    gm: &GaussianMixture,
    map: &NoiseLevelMap,
    cfg: &TrainConfig,
) -> Result<(ToyRegressor, TrainReport)> {
    let finite = [
        cfg.learning_rate,
        cfg.momentum,
        cfg.final_lr_fraction,
        cfg.grad_clip,
    ];
    if finite.iter().any(|v| !v.is_finite()) || cfg.batch_size == 0 || cfg.eval_size == 0 {
        return Err(Error::Validation(format!(
            "invalid training config {cfg:?}"
        )));
    }
    let steps = map.schedule().steps() as f64;
    let mut init_stream = NoiseStream::new(cfg.seed, 0);
    let mut data_stream = NoiseStream::new(derive_seed(cfg.seed, 1), 0);
    let mut eval_stream = NoiseStream::new(derive_seed(cfg.seed, 2), 0);

    let mut model = ToyRegressor::new(gm.dim(), &cfg.hidden, steps, &mut init_stream);
    let held_out = noisy_batch(gm, map, cfg.eval_size, cfg.discrete_t, &mut eval_stream)?;
    let initial_heldout = model.loss(&held_out.xs, &held_out.ts, &held_out.eps);

    let mut params = model.params();
    let mut velocity = vec![0.0; params.len()];
    let mut trace = Vec::new();
    let log_every = cfg.log_every.max(1);
    for it in 0..cfg.iterations {
        let batch = noisy_batch(gm, map, cfg.batch_size, cfg.discrete_t, &mut data_stream)?;
        let (loss, mut grad) = model.loss_gradient(&batch.xs, &batch.ts, &batch.eps);
        if !(loss <= cfg.max_loss) {
            trace.push((it, loss));
            return Err(Error::TrainingDiverged {
                iteration: it,
                loss,
                trace: trace.into_iter().map(|(_, l)| l).collect(),
            });
        }
        if it % log_every == 0 {
            trace.push((it, loss));
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        let progress = it as f64 / cfg.iterations.max(1) as f64;
        let lr = cfg.learning_rate * (1.0 - (1.0 - cfg.final_lr_fraction) * progress);
        for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
            *v = cfg.momentum * *v - lr * g;
            *p += *v;
        }
        model.set_params(&params)?;
    }
    let final_heldout = model.loss(&held_out.xs, &held_out.ts, &held_out.eps);
    if !(final_heldout <= cfg.max_loss) {
        return Err(Error::TrainingDiverged {
            iteration: cfg.iterations,
            loss: final_heldout,
            trace: trace.into_iter().map(|(_, l)| l).collect(),
        });
    }
    Ok((
        model,
        TrainReport {
            trace,
            initial_heldout,
            final_heldout,
        },
    ))
}
