//! The noise-predictor contract shared by every sampler.

use std::sync::atomic::{AtomicU64, Ordering};

/// A noise predictor `eps(x, t)` queried at continuous diffusion steps.
///
/// Implementations must be deterministic and return a vector of the same
/// dimension as `x`. Samplers call `predict` from several threads at once.
pub trait EpsilonModel: Sync {
    fn dim(&self) -> usize;

    fn predict(&self, x: &[f64], t: f64) -> Vec<f64>;
}

impl<M: EpsilonModel + ?Sized> EpsilonModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict(&self, x: &[f64], t: f64) -> Vec<f64> {
        (**self).predict(x, t)
    }
}

impl<M: EpsilonModel + ?Sized + Send> EpsilonModel for Box<M> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict(&self, x: &[f64], t: f64) -> Vec<f64> {
        (**self).predict(x, t)
    }
}

/// Predicts zero noise everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ZeroModel {
    pub dim: usize,
}

impl EpsilonModel for ZeroModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, x: &[f64], _t: f64) -> Vec<f64> {
        vec![0.0; x.len()]
    }
}

/// Wraps a model and counts `predict` calls.
#[derive(Debug)]
pub struct CountingModel<M> {
    inner: M,
    calls: AtomicU64,
}

impl<M: EpsilonModel> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn into_inner(self) -> M {
        self.inner
    }
}

impl<M: EpsilonModel> EpsilonModel for CountingModel<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn predict(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(x, t)
    }
}
