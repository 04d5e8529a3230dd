//! Fast sampling for diffusion probabilistic models.
//!
//! A model trained on a long linear variance schedule of `T` steps is sampled
//! with a short reverse chain of `S << T` steps. The continuous noise-level
//! map in [`schedule`] connects the two: every short-chain step is assigned a
//! continuous diffusion step at which the trained noise predictor is queried.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fast_schedule;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod toy_models;

pub use error::{Error, Result};
