//! Toy data distributions with exact noise predictors, and a trainable MLP
//! noise predictor.

pub mod mixture;
pub mod regressor;

pub use mixture::{
    analytic_epsilon, AnalyticEpsilon, GaussianMixture, MarginalMixture, MixtureSpec,
};
pub use regressor::{
    train_toy_regressor, NoisyBatch, RegressorMeta, ToyRegressor, TrainConfig, TrainReport,
};
