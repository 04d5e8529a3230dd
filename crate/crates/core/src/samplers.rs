//! Forward diffusion and the reverse samplers.
//!
//! Every reverse update has the shape
//!
//! ```text
//! x_prev = x_coef * x + eps_coef * eps(x, t_model) + noise_scale * z
//! ```
//!
//! so the full DDPM chain, FastDPM's DDPM-rev and FastDPM's DDIM-rev only
//! differ in the per-step coefficients. Chains of a batch run in parallel,
//! each on its own noise stream (`seed`, chain index).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fast_schedule::{FastSchedule, ScheduleKind};
use crate::model::EpsilonModel;
use crate::rng::NoiseStream;
use crate::schedule::{ScheduleDescriptor, VarianceSchedule};

/// Noise handling at the last reverse step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalStepNoise {
    /// No noise is added when producing `x_0`.
    #[default]
    Zero,
    /// The last step adds `sqrt(eta_tilde_1) z` like every other step.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    DdpmFull,
    DdpmRev,
    DdimRev,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::DdpmFull => "ddpm_full",
            Self::DdpmRev => "ddpm_rev",
            Self::DdimRev => "ddim_rev",
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Stochasticity of DDIM-rev, in `[0, 1]`. Ignored by the DDPM samplers.
    pub kappa: f64,
    pub seed: u64,
    #[serde(default)]
    pub final_step_noise: FinalStepNoise,
    pub batch: usize,
    /// Keep every intermediate state of every chain.
    #[serde(default)]
    pub trace: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kappa: 0.0,
            seed: 0,
            final_step_noise: FinalStepNoise::Zero,
            batch: 1,
            trace: false,
        }
    }
}

impl SamplerConfig {
    pub fn new(seed: u64, batch: usize) -> Self {
        Self {
            seed,
            batch,
            ..Self::default()
        }
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn with_final_step_noise(mut self, mode: FinalStepNoise) -> Self {
        self.final_step_noise = mode;
        self
    }

    pub fn with_trace(mut self, trace: bool) -> Self {
        self.trace = trace;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::Validation(format!(
                "kappa = {} outside [0, 1]",
                self.kappa
            )));
        }
        if self.batch == 0 {
            return Err(Error::Validation("batch must be positive".into()));
        }
        Ok(())
    }
}

/// Where a batch came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub schedule: Option<ScheduleDescriptor>,
    pub schedule_kind: Option<ScheduleKind>,
    #[serde(rename = "S")]
    pub len: usize,
    pub sampler: SamplerKind,
    pub kappa: f64,
    pub seed: u64,
    pub final_step_noise: FinalStepNoise,
}

/// Per-chain record of every state `x_K, x_{K-1}, ..., x_0`.
pub type ChainTrace = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub dim: usize,
    /// Row-major `batch x dim`.
    pub samples: Vec<f64>,
    pub provenance: Provenance,
    pub traces: Option<Vec<ChainTrace>>,
    /// Model evaluations over all chains.
    pub model_evals: u64,
    /// Standard normals drawn over all chains.
    pub normals_drawn: u64,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.samples.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.chunks_exact(self.dim.max(1))
    }
}

/// Coefficients of one reverse update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    /// Step fed to the noise predictor.
    pub model_t: f64,
    pub x_coef: f64,
    pub eps_coef: f64,
    pub noise_scale: f64,
}

/// Coefficients of the full reverse chain, ordered `t = T, ..., 1`.
pub fn ddpm_full_coefficients(sched: &VarianceSchedule) -> Vec<StepCoefficients> {
    (1..=sched.steps())
        .rev()
        .map(|t| {
            let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
            StepCoefficients {
                model_t: t as f64,
                x_coef: inv_sqrt_alpha,
                eps_coef: -inv_sqrt_alpha * sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt(),
                noise_scale: sched.beta_tilde(t).sqrt(),
            }
        })
        .collect()
}

/// DDPM-rev coefficients on a short schedule, ordered `s = S, ..., 1`.
pub fn ddpm_rev_coefficients(fs: &FastSchedule) -> Vec<StepCoefficients> {
    (1..=fs.len())
        .rev()
        .map(|s| {
            let inv_sqrt_gamma = 1.0 / fs.gamma(s).sqrt();
            StepCoefficients {
                model_t: fs.t_cont(s),
                x_coef: inv_sqrt_gamma,
                eps_coef: -inv_sqrt_gamma * fs.eta(s) / (1.0 - fs.gamma_bar(s)).sqrt(),
                noise_scale: fs.eta_tilde(s).sqrt(),
            }
        })
        .collect()
}

/// Radicands this far below zero are treated as rounding and clamped.
const RADICAND_SLACK: f64 = 1e-12;

/// DDIM-rev coefficients, ordered `s = S, ..., 1`.
///
/// The radicand `1 - gamma_bar_{s-1} - kappa^2 eta_tilde_s` equals
/// `-kappa^2 eta_1` at `s = 1`; it is clamped to zero there.
pub fn ddim_rev_coefficients(fs: &FastSchedule, kappa: f64) -> Result<Vec<StepCoefficients>> {
    (1..=fs.len())
        .rev()
        .map(|s| {
            let gb = fs.gamma_bar(s);
            let gb_prev = fs.gamma_bar(s - 1);
            let eta_tilde = fs.eta_tilde(s);
            let mut radicand = 1.0 - gb_prev - kappa * kappa * eta_tilde;
            if radicand < 0.0 {
                if s > 1 && radicand < -RADICAND_SLACK {
                    return Err(Error::Validation(format!(
                        "DDIM radicand {radicand:e} < 0 at step {s} (kappa = {kappa})"
                    )));
                }
                radicand = 0.0;
            }
            let scale = (gb_prev / gb).sqrt();
            Ok(StepCoefficients {
                model_t: fs.t_cont(s),
                x_coef: scale,
                eps_coef: -scale * (1.0 - gb).sqrt() + radicand.sqrt(),
                noise_scale: kappa * eta_tilde.sqrt(),
            })
        })
        .collect()
}

/// Output of a single reverse chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub x0: Vec<f64>,
    pub trace: Option<ChainTrace>,
    pub model_evals: u64,
}

/// Runs one chain from `x_init` through `coeffs`.
///
/// Noise is drawn at a step only when its scale is non-zero, and never at the
/// final step under [`FinalStepNoise::Zero`]. Step indices in errors count
/// down from `coeffs.len()` to 1.
pub fn reverse_chain<M: EpsilonModel + ?Sized>(
    coeffs: &[StepCoefficients],
    model: &M,
    x_init: Vec<f64>,
    stream: &mut NoiseStream,
    final_step_noise: FinalStepNoise,
    trace: bool,
) -> Result<ChainOutput> {
    let mut x = x_init;
    let dim = x.len();
    let mut states = trace.then(|| vec![x.clone()]);
    let n = coeffs.len();
    let mut z = vec![0.0; dim];
    for (i, c) in coeffs.iter().enumerate() {
        let step = n - i;
        let eps = model.predict(&x, c.model_t);
        if eps.len() != dim {
            return Err(Error::Validation(format!(
                "model returned {} values for a {dim}-dimensional input",
                eps.len()
            )));
        }
        let noisy =
            c.noise_scale != 0.0 && !(step == 1 && final_step_noise == FinalStepNoise::Zero);
        if noisy {
            stream.fill_normal(&mut z);
        }
        for k in 0..dim {
            let mut v = c.x_coef * x[k] + c.eps_coef * eps[k];
            if noisy {
                v += c.noise_scale * z[k];
            }
            x[k] = v;
        }
        if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                step,
                detail: format!("component {bad} = {}", x[bad]),
            });
        }
        if let Some(states) = states.as_mut() {
            states.push(x.clone());
        }
    }
    Ok(ChainOutput {
        x0: x,
        trace: states,
        model_evals: n as u64,
    })
}

fn run_batch<M: EpsilonModel + ?Sized>(
    coeffs: &[StepCoefficients],
    model: &M,
    cfg: &SamplerConfig,
    provenance: Provenance,
) -> Result<SampleBatch> {
    cfg.validate()?;
    let dim = model.dim();
    let chains: Vec<(ChainOutput, u64)> = (0..cfg.batch as u64)
        .into_par_iter()
        .map(|chain| {
            let mut stream = NoiseStream::new(cfg.seed, chain);
            let x_init = stream.normal_vec(dim);
            let out = reverse_chain(
                coeffs,
                model,
                x_init,
                &mut stream,
                cfg.final_step_noise,
                cfg.trace,
            )?;
            Ok((out, stream.normals_drawn()))
        })
        .collect::<Result<_>>()?;

    let mut samples = Vec::with_capacity(cfg.batch * dim);
    let mut traces = cfg.trace.then(|| Vec::with_capacity(cfg.batch));
    let (mut model_evals, mut normals_drawn) = (0, 0);
    for (out, drawn) in chains {
        samples.extend_from_slice(&out.x0);
        if let (Some(all), Some(t)) = (traces.as_mut(), out.trace) {
            all.push(t);
        }
        model_evals += out.model_evals;
        normals_drawn += drawn;
    }
    Ok(SampleBatch {
        dim,
        samples,
        provenance,
        traces,
        model_evals,
        normals_drawn,
    })
}

/// Ancestral sampling through all `T` steps of the original schedule.
pub fn ddpm_full_reverse<M: EpsilonModel + ?Sized>(
    sched: &VarianceSchedule,
    model: &M,
    cfg: &SamplerConfig,
) -> Result<SampleBatch> {
    let provenance = Provenance {
        schedule: Some(sched.descriptor()),
        schedule_kind: None,
        len: sched.steps(),
        sampler: SamplerKind::DdpmFull,
        kappa: 1.0,
        seed: cfg.seed,
        final_step_noise: cfg.final_step_noise,
    };
    run_batch(&ddpm_full_coefficients(sched), model, cfg, provenance)
}

fn fast_provenance(
    fs: &FastSchedule,
    sampler: SamplerKind,
    kappa: f64,
    cfg: &SamplerConfig,
) -> Provenance {
    Provenance {
        schedule: fs.source(),
        schedule_kind: Some(fs.kind()),
        len: fs.len(),
        sampler,
        kappa,
        seed: cfg.seed,
        final_step_noise: cfg.final_step_noise,
    }
}

/// FastDPM sampling with the DDPM-style reverse update.
pub fn fastdpm_ddpm_rev<M: EpsilonModel + ?Sized>(
    fs: &FastSchedule,
    model: &M,
    cfg: &SamplerConfig,
) -> Result<SampleBatch> {
    let provenance = fast_provenance(fs, SamplerKind::DdpmRev, 1.0, cfg);
    run_batch(&ddpm_rev_coefficients(fs), model, cfg, provenance)
}

/// FastDPM sampling with the DDIM-style reverse update and stochasticity `cfg.kappa`.
pub fn fastdpm_ddim_rev<M: EpsilonModel + ?Sized>(
    fs: &FastSchedule,
    model: &M,
    cfg: &SamplerConfig,
) -> Result<SampleBatch> {
    cfg.validate()?;
    let coeffs = ddim_rev_coefficients(fs, cfg.kappa)?;
    let provenance = fast_provenance(fs, SamplerKind::DdimRev, cfg.kappa, cfg);
    run_batch(&coeffs, model, cfg, provenance)
}

/// Dispatches on the sampler kind; `DdpmFull` ignores `fs`.
pub fn sample<M: EpsilonModel + ?Sized>(
    kind: SamplerKind,
    sched: &VarianceSchedule,
    fs: Option<&FastSchedule>,
    model: &M,
    cfg: &SamplerConfig,
) -> Result<SampleBatch> {
    match (kind, fs) {
        (SamplerKind::DdpmFull, _) => ddpm_full_reverse(sched, model, cfg),
        (SamplerKind::DdpmRev, Some(fs)) => fastdpm_ddpm_rev(fs, model, cfg),
        (SamplerKind::DdimRev, Some(fs)) => fastdpm_ddim_rev(fs, model, cfg),
        (_, None) => Err(Error::Usage(format!("{kind} needs a fast schedule"))),
    }
}

fn check_step(sched: &VarianceSchedule, t: usize) -> Result<()> {
    if t < 1 || t > sched.steps() {
        return Err(Error::Range {
            what: "t",
            value: t as f64,
            lo: 1.0,
            hi: sched.steps() as f64,
        });
    }
    Ok(())
}

/// Draws `x_t ~ N(sqrt(alpha_bar_t) x0, (1 - alpha_bar_t) I)` in one jump.
pub fn forward_jump(
    sched: &VarianceSchedule,
    x0: &[f64],
    t: usize,
    stream: &mut NoiseStream,
) -> Result<Vec<f64>> {
    check_step(sched, t)?;
    let a = sched.alpha_bar(t);
    let (signal, noise) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x0
        .iter()
        .map(|&v| signal * v + noise * stream.normal())
        .collect())
}

/// One diffusion step `x_t ~ N(sqrt(1 - beta_t) x_{t-1}, beta_t I)`.
pub fn forward_step(
    sched: &VarianceSchedule,
    x_prev: &[f64],
    t: usize,
    stream: &mut NoiseStream,
) -> Result<Vec<f64>> {
    check_step(sched, t)?;
    let (signal, noise) = (sched.alpha(t).sqrt(), sched.beta(t).sqrt());
    Ok(x_prev
        .iter()
        .map(|&v| signal * v + noise * stream.normal())
        .collect())
}

/// Composes `t` single diffusion steps starting from `x0`.
pub fn forward_chain(
    sched: &VarianceSchedule,
    x0: &[f64],
    t: usize,
    stream: &mut NoiseStream,
) -> Result<Vec<f64>> {
    check_step(sched, t)?;
    let mut x = x0.to_vec();
    for step in 1..=t {
        x = forward_step(sched, &x, step, stream)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fast_schedule::{build, build_step_schedule, Variant};
    use crate::model::{CountingModel, ZeroModel};
    use crate::schedule::NoiseLevelMap;

    /// `eps*(x, t) = sqrt(1 - alpha_bar_t) x` for N(0, I) data.
    struct StandardNormalEps {
        map: NoiseLevelMap,
        dim: usize,
    }

    impl EpsilonModel for StandardNormalEps {
        fn dim(&self) -> usize {
            self.dim
        }
        fn predict(&self, x: &[f64], t: f64) -> Vec<f64> {
            let s = (1.0 - self.map.alpha_bar_at(t).unwrap()).sqrt();
            x.iter().map(|v| s * v).collect()
        }
    }

    fn sched(steps: usize) -> VarianceSchedule {
        VarianceSchedule::new(1e-4, 0.02, steps).unwrap()
    }

    #[test]
    fn forward_jump_first_step() {
        let s = sched(1000);
        let x0 = [0.3, -1.2];
        let mut a = NoiseStream::new(5, 0);
        let mut b = NoiseStream::new(5, 0);
        let x1 = forward_jump(&s, &x0, 1, &mut a).unwrap();
        for (k, v) in x1.iter().enumerate() {
            let expected = 0.9999f64.sqrt() * x0[k] + 0.01 * b.normal();
            assert!((v - expected).abs() < 1e-15);
        }
        assert!(forward_jump(&s, &x0, 0, &mut a).is_err());
        assert!(forward_jump(&s, &x0, 1001, &mut a).is_err());
    }

    #[test]
    fn forward_jump_zero_mean_variance() {
        let s = sched(1000);
        let mut st = NoiseStream::new(9, 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| forward_jump(&s, &[0.0], 300, &mut st).unwrap()[0])
            .collect();
        let var = xs.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let expected = 1.0 - s.alpha_bar(300);
        assert!((var / expected - 1.0).abs() < 0.02);
    }

    #[test]
    fn zero_model_variance_recursion() {
        // eps = 0: x_{t-1} = x_t / sqrt(alpha_t) + sqrt(beta_tilde_t) z, so
        // v_{t-1} = v_t / alpha_t + beta_tilde_t with v_T = 1 and no noise at t = 1.
        let s = sched(200);
        let mut v = 1.0;
        for t in (1..=200).rev() {
            v = v / s.alpha(t) + if t > 1 { s.beta_tilde(t) } else { 0.0 };
        }
        let cfg = SamplerConfig::new(3, 20_000);
        let out = ddpm_full_reverse(&s, &ZeroModel { dim: 1 }, &cfg).unwrap();
        let n = out.len() as f64;
        let mean = out.samples.iter().sum::<f64>() / n;
        let var = out.samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = v * (2.0 / (n - 1.0)).sqrt();
        assert!((var - v).abs() < 4.0 * se, "var {var} vs {v}");
    }

    #[test]
    fn full_reverse_is_reproducible() {
        let s = sched(200);
        let model = StandardNormalEps {
            map: NoiseLevelMap::new(s.clone()),
            dim: 2,
        };
        let cfg = SamplerConfig::new(42, 1);
        let a = ddpm_full_reverse(&s, &model, &cfg).unwrap();
        let b = ddpm_full_reverse(&s, &model, &cfg).unwrap();
        let bits = |b: &SampleBatch| b.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn batch_size_does_not_change_chains() {
        let s = sched(200);
        let m = NoiseLevelMap::new(s.clone());
        let fs = build(&m, ScheduleKind::VarLinear, 10).unwrap();
        let model = StandardNormalEps { map: m, dim: 3 };
        let small = fastdpm_ddpm_rev(&fs, &model, &SamplerConfig::new(8, 2)).unwrap();
        let large = fastdpm_ddpm_rev(&fs, &model, &SamplerConfig::new(8, 5)).unwrap();
        assert_eq!(small.samples[..], large.samples[..6]);
    }

    #[test]
    fn full_length_step_schedule_matches_full_reverse() {
        let s = sched(200);
        let m = NoiseLevelMap::new(s.clone());
        let fs = build_step_schedule(&m, 200, Variant::Linear).unwrap();
        let model = StandardNormalEps { map: m, dim: 2 };
        for mode in [FinalStepNoise::Zero, FinalStepNoise::Literal] {
            let cfg = SamplerConfig::new(17, 4)
                .with_trace(true)
                .with_final_step_noise(mode);
            let full = ddpm_full_reverse(&s, &model, &cfg).unwrap();
            let fast = fastdpm_ddpm_rev(&fs, &model, &cfg).unwrap();
            for (a, b) in full.traces.unwrap().iter().zip(fast.traces.unwrap().iter()) {
                for (xa, xb) in a.iter().zip(b) {
                    for (u, v) in xa.iter().zip(xb) {
                        assert!((u - v).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn kappa_one_matches_ddpm_rev() {
        let s = sched(1000);
        let m = NoiseLevelMap::new(s.clone());
        let fs = build(&m, ScheduleKind::StepQuadratic, 20).unwrap();
        let model = StandardNormalEps { map: m, dim: 2 };
        let cfg = SamplerConfig::new(4, 3).with_kappa(1.0).with_trace(true);
        let ddpm = fastdpm_ddpm_rev(&fs, &model, &cfg).unwrap();
        let ddim = fastdpm_ddim_rev(&fs, &model, &cfg).unwrap();
        let max_dev = ddpm
            .traces
            .unwrap()
            .iter()
            .flatten()
            .flatten()
            .zip(ddim.traces.unwrap().iter().flatten().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_dev <= 1e-10, "{max_dev}");
    }

    #[test]
    fn kappa_zero_is_deterministic_after_init() {
        let s = sched(200);
        let m = NoiseLevelMap::new(s.clone());
        let fs = build(&m, ScheduleKind::VarQuadratic, 8).unwrap();
        let model = StandardNormalEps { map: m, dim: 2 };
        let cfg = SamplerConfig::new(1, 6);
        let a = fastdpm_ddim_rev(&fs, &model, &cfg).unwrap();
        let b = fastdpm_ddim_rev(&fs, &model, &cfg).unwrap();
        assert_eq!(a.samples, b.samples);
        // only x_S was drawn
        assert_eq!(a.normals_drawn, 6 * 2);
    }

    #[test]
    fn ddim_single_step_terminal_algebra() {
        let s = sched(200);
        let m = NoiseLevelMap::new(s.clone());
        let fs = build(&m, ScheduleKind::VarLinear, 1).unwrap();
        let model = StandardNormalEps { map: m, dim: 2 };
        let coeffs = ddim_rev_coefficients(&fs, 0.0).unwrap();
        let x1 = vec![0.7, -0.4];
        let mut st = NoiseStream::new(0, 0);
        let out = reverse_chain(
            &coeffs,
            &model,
            x1.clone(),
            &mut st,
            FinalStepNoise::Zero,
            false,
        )
        .unwrap();
        let eps = model.predict(&x1, fs.t_cont(1));
        let gb = fs.gamma_bar(1);
        for k in 0..2 {
            let expected = (x1[k] - (1.0 - gb).sqrt() * eps[k]) / gb.sqrt();
            assert!((out.x0[k] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn ddim_terminal_radicand_is_clamped() {
        let s = sched(200);
        let m = NoiseLevelMap::new(s);
        let fs = build(&m, ScheduleKind::StepLinear, 10).unwrap();
        let coeffs = ddim_rev_coefficients(&fs, 0.7).unwrap();
        let last = coeffs.last().unwrap();
        let gb = fs.gamma_bar(1);
        assert!((last.eps_coef + (1.0 - gb).sqrt() / gb.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn call_counts() {
        let s = sched(200);
        let m = NoiseLevelMap::new(s.clone());
        let fs = build(&m, ScheduleKind::StepLinear, 10).unwrap();
        let model = CountingModel::new(ZeroModel { dim: 2 });
        let cfg = SamplerConfig::new(0, 3);
        let out = fastdpm_ddpm_rev(&fs, &model, &cfg).unwrap();
        assert_eq!(model.calls(), 30);
        assert_eq!(out.model_evals, 30);
        model.reset();
        ddpm_full_reverse(&s, &model, &cfg).unwrap();
        assert_eq!(model.calls(), 600);
    }

    #[test]
    fn numeric_failure_reports_step() {
        struct Exploding;
        impl EpsilonModel for Exploding {
            fn dim(&self) -> usize {
                1
            }
            fn predict(&self, _x: &[f64], t: f64) -> Vec<f64> {
                vec![if t < 100.5 { f64::NAN } else { 0.0 }]
            }
        }
        let s = sched(200);
        let err = ddpm_full_reverse(&s, &Exploding, &SamplerConfig::new(0, 1)).unwrap_err();
        assert!(matches!(err, Error::Numeric { step: 100, .. }), "{err}");
    }

    #[test]
    fn invalid_config() {
        let s = sched(200);
        let m = NoiseLevelMap::new(s);
        let fs = build(&m, ScheduleKind::StepLinear, 10).unwrap();
        let cfg = SamplerConfig::new(0, 1).with_kappa(1.5);
        assert!(fastdpm_ddim_rev(&fs, &ZeroModel { dim: 1 }, &cfg).is_err());
        let cfg = SamplerConfig::new(0, 0);
        assert!(fastdpm_ddpm_rev(&fs, &ZeroModel { dim: 1 }, &cfg).is_err());
    }
}
