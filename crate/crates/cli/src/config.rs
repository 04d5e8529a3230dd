//! Experiment configuration and its validation.

use std::fs;
use std::path::{Path, PathBuf};

use fastdpm::fast_schedule::{Family, Variant};
use fastdpm::samplers::FinalStepNoise;
use fastdpm::schedule::ScheduleDescriptor;
use fastdpm::toy_models::{GaussianMixture, MixtureSpec, ToyRegressor};
use fastdpm::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where the data distribution comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSpec {
    /// A built-in mixture: `gaussian2d`, `gmm2` or `gmm3`.
    Preset(String),
    /// A mixture JSON file (`{weights, means, covariances, labels}`).
    Path(PathBuf),
    Inline(MixtureSpec),
}

impl DataSpec {
    pub fn load(&self) -> Result<GaussianMixture> {
        match self {
            Self::Preset(name) => GaussianMixture::preset(name),
            Self::Path(path) => {
                let spec: MixtureSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
                GaussianMixture::from_spec(spec)
            }
            Self::Inline(spec) => GaussianMixture::from_spec(spec.clone()),
        }
    }
}

/// The noise predictor used for sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    /// The exact noise predictor of the data mixture.
    Analytic,
    /// A saved regressor, given by its file stem (`<stem>.bin` + `<stem>.json`).
    Trained(PathBuf),
}

/// Sampler entries of a sweep. `ddim_rev` is expanded over every `kappa`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepSampler {
    DdpmRev,
    DdimRev,
}

fn default_samples() -> usize {
    2000
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schedule: ScheduleDescriptor,
    pub data: DataSpec,
    #[serde(default = "default_model")]
    pub model: ModelChoice,
    pub kinds: Vec<Family>,
    pub variants: Vec<Variant>,
    #[serde(rename = "S")]
    pub lengths: Vec<usize>,
    pub samplers: Vec<SweepSampler>,
    /// Stochasticity values for `ddim_rev`; `ddpm_rev` rows always report 1.
    #[serde(default = "default_kappas")]
    pub kappas: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_samples")]
    pub samples_per_cell: usize,
    /// Size of the reference set drawn from the data; defaults to `samples_per_cell`.
    #[serde(default)]
    pub reference_samples: Option<usize>,
    #[serde(default)]
    pub final_step_noise: FinalStepNoise,
    /// Compute accuracy by sampling each label from its own sub-mixture.
    /// Needs a labeled mixture and the analytic model.
    #[serde(default = "default_true")]
    pub accuracy: bool,
    /// Record per-cell wall-clock time. Off by default so outputs stay byte-identical.
    #[serde(default)]
    pub timing: bool,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_model() -> ModelChoice {
    ModelChoice::Analytic
}

fn default_kappas() -> Vec<f64> {
    vec![0.0]
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// The sweep used when no config file is given.
    pub fn default_for_preset(preset: &str) -> Self {
        Self {
            schedule: ScheduleDescriptor::reference(1000),
            data: DataSpec::Preset(preset.into()),
            model: ModelChoice::Analytic,
            kinds: vec![Family::Step, Family::Var],
            variants: vec![Variant::Linear],
            lengths: vec![5, 10, 50],
            samplers: vec![SweepSampler::DdpmRev, SweepSampler::DdimRev],
            kappas: vec![0.0],
            seeds: vec![0],
            samples_per_cell: default_samples(),
            reference_samples: None,
            final_step_noise: FinalStepNoise::Zero,
            accuracy: true,
            timing: false,
            out: None,
        }
    }

    /// Sampler/kappa pairs in sweep order.
    pub fn sampler_cells(&self) -> Vec<(SweepSampler, f64)> {
        let mut out = Vec::new();
        for &s in &self.samplers {
            match s {
                SweepSampler::DdpmRev => out.push((s, 1.0)),
                SweepSampler::DdimRev => out.extend(self.kappas.iter().map(|&k| (s, k))),
            }
        }
        out
    }

    /// Hex SHA-256 of the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Checks everything that can be checked before sampling starts.
    pub fn validate(&self) -> Result<()> {
        let sched = self.schedule.build()?;
        let empty = [
            ("kinds", self.kinds.is_empty()),
            ("variants", self.variants.is_empty()),
            ("S", self.lengths.is_empty()),
            ("samplers", self.samplers.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Validation(format!("sweep list {name} is empty")));
        }
        if self.samplers.contains(&SweepSampler::DdimRev) && self.kappas.is_empty() {
            return Err(Error::Validation(
                "ddim_rev requested with no kappa values".into(),
            ));
        }
        if let Some(k) = self.kappas.iter().find(|k| !(0.0..=1.0).contains(*k)) {
            return Err(Error::Validation(format!("kappa = {k} outside [0, 1]")));
        }
        if let Some(s) = self.lengths.iter().find(|&&s| s == 0 || s > sched.steps()) {
            return Err(Error::Validation(format!(
                "S = {s} outside 1..={}",
                sched.steps()
            )));
        }
        let gm = self.data.load()?;
        let needed = gm.dim() + 1;
        let reference = self.reference_samples.unwrap_or(self.samples_per_cell);
        if self.samples_per_cell < needed || reference < needed {
            return Err(Error::Validation(format!(
                "Frechet distance needs at least {needed} samples per set"
            )));
        }
        if let ModelChoice::Trained(stem) = &self.model {
            let model = ToyRegressor::load(stem)?;
            if model.meta().dim != gm.dim() {
                return Err(Error::Validation(format!(
                    "trained model has dimension {}, data has {}",
                    model.meta().dim,
                    gm.dim()
                )));
            }
        }
        Ok(())
    }
}
