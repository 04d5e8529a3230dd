//! Short approximate schedules of length `S`.
//!
//! A [`FastSchedule`] is a decreasing sequence of noise levels
//! `1 > r_1 > ... > r_S > 0` together with the per-step variances
//! `eta_s = 1 - r_s^2 / r_{s-1}^2` and the continuous steps `T(r_s)` at which
//! the pretrained noise predictor is queried. Two constructions exist:
//!
//! * `VAR`: choose `eta_s = (1 + c s) eta_0` (linear) or `(1 + c s)^2 eta_0`
//!   (quadratic) and solve for `c` so that `prod (1 - eta_s) = alpha_bar_T`.
//! * `STEP`: choose integer steps `tau_s` (`floor(c s)` with `c = T / S`, or
//!   `floor(c s^2)` with `c = 0.8 T / S^2`) and set `r_s = sqrt(alpha_bar_{tau_s})`.
//!
//! STEP is the special case of VAR with `eta_s = 1 - alpha_bar_{tau_s} / alpha_bar_{tau_{s-1}}`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{NoiseLevelMap, ScheduleDescriptor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Family {
    #[serde(alias = "var")]
    Var,
    #[serde(alias = "step")]
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScheduleKind {
    VarLinear,
    VarQuadratic,
    StepLinear,
    StepQuadratic,
}

impl ScheduleKind {
    pub fn new(family: Family, variant: Variant) -> Self {
        match (family, variant) {
            (Family::Var, Variant::Linear) => Self::VarLinear,
            (Family::Var, Variant::Quadratic) => Self::VarQuadratic,
            (Family::Step, Variant::Linear) => Self::StepLinear,
            (Family::Step, Variant::Quadratic) => Self::StepQuadratic,
        }
    }

    pub fn family(self) -> Family {
        match self {
            Self::VarLinear | Self::VarQuadratic => Family::Var,
            Self::StepLinear | Self::StepQuadratic => Family::Step,
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            Self::VarLinear | Self::StepLinear => Variant::Linear,
            Self::VarQuadratic | Self::StepQuadratic => Variant::Quadratic,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::VarLinear => "VAR_LINEAR",
            Self::VarQuadratic => "VAR_QUADRATIC",
            Self::StepLinear => "STEP_LINEAR",
            Self::StepQuadratic => "STEP_QUADRATIC",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Serialized form of a [`FastSchedule`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastScheduleRecord {
    pub kind: ScheduleKind,
    #[serde(rename = "S")]
    pub len: usize,
    pub eta: Vec<f64>,
    pub r: Vec<f64>,
    pub t_cont: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<Vec<usize>>,
}

/// An `S`-step approximate schedule. Accessors are 1-based in `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct FastSchedule {
    kind: ScheduleKind,
    eta: Vec<f64>,
    gamma: Vec<f64>,
    // gamma_bar[0] = 1
    gamma_bar: Vec<f64>,
    eta_tilde: Vec<f64>,
    t_cont: Vec<f64>,
    tau: Option<Vec<usize>>,
    constant: Option<f64>,
    source: Option<ScheduleDescriptor>,
}

impl FastSchedule {
    fn assemble(
        kind: ScheduleKind,
        eta: Vec<f64>,
        gamma: Vec<f64>,
        gamma_bar: Vec<f64>,
        t_cont: Vec<f64>,
        tau: Option<Vec<usize>>,
        constant: Option<f64>,
    ) -> Self {
        let eta_tilde = (1..=eta.len())
            .map(|s| {
                if s == 1 {
                    eta[0]
                } else {
                    (1.0 - gamma_bar[s - 1]) / (1.0 - gamma_bar[s]) * eta[s - 1]
                }
            })
            .collect();
        Self {
            kind,
            eta,
            gamma,
            gamma_bar,
            eta_tilde,
            t_cont,
            tau,
            constant,
            source: None,
        }
    }

    fn with_source(mut self, source: ScheduleDescriptor) -> Self {
        self.source = Some(source);
        self
    }

    /// The pretrained schedule this was derived from, when known.
    pub fn source(&self) -> Option<ScheduleDescriptor> {
        self.source
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Length `S` of the approximate process.
    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    pub fn eta(&self, s: usize) -> f64 {
        self.eta[s - 1]
    }

    pub fn gamma(&self, s: usize) -> f64 {
        self.gamma[s - 1]
    }

    /// `prod_{i <= s} gamma_i` for `0 <= s <= S`.
    pub fn gamma_bar(&self, s: usize) -> f64 {
        self.gamma_bar[s]
    }

    /// Noise level `r_s = sqrt(gamma_bar_s)` for `0 <= s <= S`.
    pub fn r(&self, s: usize) -> f64 {
        self.gamma_bar[s].sqrt()
    }

    pub fn eta_tilde(&self, s: usize) -> f64 {
        self.eta_tilde[s - 1]
    }

    /// Continuous step `T(r_s)` passed to the noise predictor.
    pub fn t_cont(&self, s: usize) -> f64 {
        self.t_cont[s - 1]
    }

    pub fn etas(&self) -> &[f64] {
        &self.eta
    }

    pub fn eta_tildes(&self) -> &[f64] {
        &self.eta_tilde
    }

    pub fn t_conts(&self) -> &[f64] {
        &self.t_cont
    }

    pub fn noise_levels(&self) -> Vec<f64> {
        self.gamma_bar[1..].iter().map(|g| g.sqrt()).collect()
    }

    pub fn tau(&self) -> Option<&[usize]> {
        self.tau.as_deref()
    }

    /// The schedule constant `c` (solved for VAR, `T/S` or `0.8 T/S^2` for STEP).
    pub fn constant(&self) -> Option<f64> {
        self.constant
    }

    /// `ln prod_s (1 - eta_s)`.
    pub fn log_terminal_product(&self) -> f64 {
        self.eta.iter().map(|&e| (-e).ln_1p()).sum()
    }

    pub fn to_record(&self) -> FastScheduleRecord {
        FastScheduleRecord {
            kind: self.kind,
            len: self.len(),
            eta: self.eta.clone(),
            r: self.noise_levels(),
            t_cont: self.t_cont.clone(),
            tau: self.tau.clone(),
        }
    }

    /// Rebuilds a schedule from its serialized form. `gamma_bar` is taken
    /// from `r^2`, so the record's `eta` and `r` are not forced to agree; use
    /// [`step_as_var_equivalence`] to check a STEP record.
    pub fn from_record(rec: FastScheduleRecord) -> Result<Self> {
        let n = rec.len;
        if n == 0 || rec.eta.len() != n || rec.r.len() != n || rec.t_cont.len() != n {
            return Err(Error::Validation(format!(
                "schedule record lengths disagree with S = {n}"
            )));
        }
        if let Some(tau) = &rec.tau {
            if tau.len() != n {
                return Err(Error::Validation("tau length disagrees with S".into()));
            }
        }
        if !rec.eta.iter().all(|&e| e > 0.0 && e < 1.0) {
            return Err(Error::Validation("eta entries must lie in (0, 1)".into()));
        }
        let mut prev = 1.0;
        for &r in &rec.r {
            if !(r > 0.0 && r < prev) {
                return Err(Error::Validation(
                    "noise levels must be strictly decreasing in (0, 1)".into(),
                ));
            }
            prev = r;
        }
        if rec.t_cont.windows(2).any(|w| w[1] <= w[0]) || rec.t_cont[0] <= 0.0 {
            return Err(Error::Validation(
                "continuous steps must be positive and strictly increasing".into(),
            ));
        }
        let gamma = rec.eta.iter().map(|e| 1.0 - e).collect();
        let gamma_bar = std::iter::once(1.0)
            .chain(rec.r.iter().map(|r| r * r))
            .collect();
        Ok(Self::assemble(
            rec.kind, rec.eta, gamma, gamma_bar, rec.t_cont, rec.tau, None,
        ))
    }
}

impl Serialize for FastSchedule {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        self.to_record().serialize(serializer)
    }
}

/// Builds the schedule of the requested kind.
pub fn build(map: &NoiseLevelMap, kind: ScheduleKind, len: usize) -> Result<FastSchedule> {
    match kind.family() {
        Family::Step => build_step_schedule(map, len, kind.variant()),
        Family::Var => build_var_schedule(map, len, kind.variant()),
    }
}

/// Integer steps `tau_1 < ... < tau_S` for a STEP schedule.
///
/// `floor(T s / S)` and `floor(4 T s^2 / (5 S^2))` are evaluated in exact
/// integer arithmetic. Zeros are clamped to 1 and repeated values dropped, so
/// the result can be shorter than `len` for quadratic schedules with `S`
/// close to `T`.
pub fn step_indices(steps: usize, len: usize, variant: Variant) -> Result<Vec<usize>> {
    if len < 1 || len > steps {
        return Err(Error::Range {
            what: "S",
            value: len as f64,
            lo: 1.0,
            hi: steps as f64,
        });
    }
    let (big_t, big_s) = (steps as u128, len as u128);
    let mut tau: Vec<usize> = (1..=big_s)
        .map(|s| match variant {
            Variant::Linear => (big_t * s / big_s) as usize,
            Variant::Quadratic => (4 * big_t * s * s / (5 * big_s * big_s)) as usize,
        })
        .map(|t| t.max(1))
        .collect();
    tau.dedup();
    if tau.len() < len {
        log::warn!(
            "STEP {variant:?} schedule with S = {len}, T = {steps} collapsed to {} distinct steps",
            tau.len()
        );
    }
    Ok(tau)
}

pub fn build_step_schedule(
    map: &NoiseLevelMap,
    len: usize,
    variant: Variant,
) -> Result<FastSchedule> {
    let sched = map.schedule();
    let steps = sched.steps();
    let tau = step_indices(steps, len, variant)?;

    let mut eta = Vec::with_capacity(tau.len());
    let mut gamma = Vec::with_capacity(tau.len());
    let mut gamma_bar = Vec::with_capacity(tau.len() + 1);
    gamma_bar.push(1.0);
    let mut prev = 0;
    for &t in &tau {
        let log_ratio = sched.log_alpha_ratio(prev, t);
        eta.push(-log_ratio.exp_m1());
        gamma.push(log_ratio.exp());
        gamma_bar.push(sched.alpha_bar(t));
        prev = t;
    }
    let t_cont = tau.iter().map(|&t| t as f64).collect();
    let constant = match variant {
        Variant::Linear => steps as f64 / len as f64,
        Variant::Quadratic => 0.8 * steps as f64 / (len * len) as f64,
    };
    Ok(FastSchedule::assemble(
        ScheduleKind::new(Family::Step, variant),
        eta,
        gamma,
        gamma_bar,
        t_cont,
        Some(tau),
        Some(constant),
    )
    .with_source(sched.descriptor()))
}

fn var_eta(variant: Variant, eta_0: f64, c: f64, s: usize) -> f64 {
    let k = 1.0 + c * s as f64;
    match variant {
        Variant::Linear => k * eta_0,
        Variant::Quadratic => k * k * eta_0,
    }
}

/// Largest admissible variance in a VAR schedule.
const VAR_ETA_CAP: f64 = 1.0 - 1e-6;
const VAR_RESIDUAL_TOL: f64 = 1e-13;

/// Solves for the VAR constant `c > 0` with `sum_s ln(1 - eta_s(c)) = ln alpha_bar_T`.
///
/// The residual is strictly decreasing in `c`, so plain bisection on
/// `[0, c_max]` is used, where `c_max` puts the largest variance at
/// `1 - 1e-6`.
pub fn solve_var_constant(map: &NoiseLevelMap, len: usize, variant: Variant) -> Result<f64> {
    if len < 1 {
        return Err(Error::Range {
            what: "S",
            value: 0.0,
            lo: 1.0,
            hi: f64::INFINITY,
        });
    }
    let sched = map.schedule();
    let eta_0 = sched.beta_1();
    let target = sched.log_alpha_bar(sched.steps());
    let residual = |c: f64| -> f64 {
        (1..=len)
            .map(|s| (-var_eta(variant, eta_0, c, s)).ln_1p())
            .sum::<f64>()
            - target
    };

    let c_max = match variant {
        Variant::Linear => (VAR_ETA_CAP / eta_0 - 1.0) / len as f64,
        Variant::Quadratic => ((VAR_ETA_CAP / eta_0).sqrt() - 1.0) / len as f64,
    };
    let (mut lo, mut hi) = (0.0, c_max);
    let (f_lo, f_hi) = (residual(lo), residual(hi));
    if f_lo <= 0.0 {
        return Err(Error::Schedule(format!(
            "VAR with S = {len}: constant variances eta_0 = {eta_0} already reach alpha_bar_T, no c > 0 exists"
        )));
    }
    if f_hi >= 0.0 {
        return Err(Error::Schedule(format!(
            "VAR with S = {len}: prod(1 - eta_s) cannot reach alpha_bar_T = {:e} with every eta_s <= 1 - 1e-6",
            target.exp()
        )));
    }

    let mut best = (f_hi.abs(), hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f = residual(mid);
        if f.abs() < best.0 {
            best = (f.abs(), mid);
        }
        if f.abs() <= VAR_RESIDUAL_TOL {
            break;
        }
        if f > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best.1)
}

pub fn build_var_schedule(
    map: &NoiseLevelMap,
    len: usize,
    variant: Variant,
) -> Result<FastSchedule> {
    let c = solve_var_constant(map, len, variant)?;
    let eta_0 = map.schedule().beta_1();
    let eta: Vec<f64> = (1..=len).map(|s| var_eta(variant, eta_0, c, s)).collect();
    let gamma: Vec<f64> = eta.iter().map(|e| 1.0 - e).collect();
    let mut gamma_bar = Vec::with_capacity(len + 1);
    gamma_bar.push(1.0);
    let mut log_prod = 0.0;
    for &e in &eta {
        log_prod += (-e).ln_1p();
        gamma_bar.push(log_prod.exp());
    }
    let t_cont = gamma_bar[1..]
        .iter()
        .map(|g| map.step_of_noise_level(g.sqrt()))
        .collect::<Result<Vec<_>>>()?;
    Ok(FastSchedule::assemble(
        ScheduleKind::new(Family::Var, variant),
        eta,
        gamma,
        gamma_bar,
        t_cont,
        None,
        Some(c),
    )
    .with_source(map.schedule().descriptor()))
}

/// Relative tolerance of the STEP-as-VAR identity check.
pub const STEP_VAR_TOLERANCE: f64 = 1e-12;

/// Checks that accumulating `gamma_s = 1 - eta_s` reproduces `gamma_bar_s = alpha_bar_{tau_s}`.
///
/// `gamma_s` is used as stored rather than re-formed from `eta_s`, which
/// cancels badly when `eta_s` is close to 1.
pub fn step_as_var_equivalence(fs: &FastSchedule) -> Result<bool> {
    if fs.kind.family() != Family::Step {
        return Err(Error::Usage(format!(
            "STEP-as-VAR check needs a STEP schedule, got {}",
            fs.kind
        )));
    }
    let mut prod = 1.0;
    for s in 1..=fs.len() {
        prod *= fs.gamma(s);
        let expected = fs.gamma_bar(s);
        if ((prod - expected) / expected).abs() > STEP_VAR_TOLERANCE {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::VarianceSchedule;

    fn map(steps: usize) -> NoiseLevelMap {
        NoiseLevelMap::new(VarianceSchedule::new(1e-4, 0.02, steps).unwrap())
    }

    #[test]
    fn step_linear_indices() {
        let fs = build_step_schedule(&map(1000), 10, Variant::Linear).unwrap();
        let expected: Vec<usize> = (1..=10).map(|s| 100 * s).collect();
        assert_eq!(fs.tau().unwrap(), expected.as_slice());
        assert_eq!(fs.constant(), Some(100.0));
    }

    #[test]
    fn step_quadratic_indices() {
        let fs = build_step_schedule(&map(1000), 10, Variant::Quadratic).unwrap();
        assert_eq!(
            fs.tau().unwrap(),
            &[8, 32, 72, 128, 200, 288, 392, 512, 648, 800]
        );
        assert_eq!(fs.constant(), Some(8.0));
        // tau_S = 800 < T leaves r_S above sqrt(alpha_bar_T)
        let m = map(1000);
        assert!(fs.r(10) > m.schedule().alpha_bar(1000).sqrt());
    }

    #[test]
    fn step_identity_subset_recovers_betas() {
        let m = map(200);
        let fs = build_step_schedule(&m, 200, Variant::Linear).unwrap();
        assert_eq!(fs.len(), 200);
        for s in 1..=200 {
            assert_eq!(fs.tau().unwrap()[s - 1], s);
            let beta = m.schedule().beta(s);
            assert!(((fs.eta(s) - beta) / beta).abs() < 1e-14, "s = {s}");
        }
    }

    #[test]
    fn step_quadratic_collisions_are_deduplicated() {
        let tau = step_indices(200, 190, Variant::Quadratic).unwrap();
        assert!(tau.len() < 190);
        assert_eq!(tau[0], 1);
        assert!(tau.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn step_range_errors() {
        let m = map(200);
        assert!(matches!(
            build_step_schedule(&m, 0, Variant::Linear),
            Err(Error::Range { .. })
        ));
        assert!(matches!(
            build_step_schedule(&m, 201, Variant::Linear),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn step_continuous_steps_are_fixed_points() {
        let m = map(1000);
        let fs = build_step_schedule(&m, 20, Variant::Quadratic).unwrap();
        for s in 1..=fs.len() {
            let t = m.step_of_noise_level(fs.r(s)).unwrap();
            assert!((t - fs.t_cont(s)).abs() < 1e-6);
        }
    }

    #[test]
    fn var_single_step_closed_form() {
        let m = map(1000);
        let fs = build_var_schedule(&m, 1, Variant::Linear).unwrap();
        let a_t = m.schedule().alpha_bar(1000);
        assert!(((fs.eta(1) - (1.0 - a_t)) / (1.0 - a_t)).abs() < 1e-12);
        let c = (1.0 - a_t) / 1e-4 - 1.0;
        assert!(((fs.constant().unwrap() - c) / c).abs() < 1e-10);
    }

    #[test]
    fn var_meets_terminal_constraint() {
        let m = map(1000);
        let target = m.schedule().alpha_bar(1000);
        for variant in [Variant::Linear, Variant::Quadratic] {
            for len in [2, 5, 10, 50, 100] {
                let fs = build_var_schedule(&m, len, variant).unwrap();
                let prod: f64 = fs.etas().iter().map(|e| 1.0 - e).product();
                assert!(((prod - target) / target).abs() < 1e-10);
                assert!((fs.r(len) - target.sqrt()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn var_rejects_unreachable_target() {
        // alpha_bar_T ~ e^-50 cannot be reached by two capped variances
        let s = VarianceSchedule::new(1e-4, 0.02, 5000).unwrap();
        let m = NoiseLevelMap::new(s);
        let err = build_var_schedule(&m, 2, Variant::Linear).unwrap_err();
        assert!(matches!(err, Error::Schedule(ref msg) if msg.contains("cannot reach")));
    }

    #[test]
    fn schedule_invariants_hold() {
        for steps in [200, 1000] {
            let m = map(steps);
            for kind in [
                ScheduleKind::VarLinear,
                ScheduleKind::VarQuadratic,
                ScheduleKind::StepLinear,
                ScheduleKind::StepQuadratic,
            ] {
                for len in [1, 3, 10, 50] {
                    let fs = build(&m, kind, len).unwrap();
                    let mut prev_r = 1.0;
                    let mut prev_t = 0.0;
                    for s in 1..=fs.len() {
                        assert!(fs.r(s) < prev_r && fs.r(s) > 0.0);
                        assert!(fs.t_cont(s) > prev_t && fs.t_cont(s) <= steps as f64);
                        assert!(fs.eta(s) > 0.0 && fs.eta(s) < 1.0);
                        assert!(fs.eta_tilde(s) <= fs.eta(s));
                        assert!((fs.r(s).powi(2) / fs.gamma_bar(s) - 1.0).abs() < 1e-15);
                        prev_r = fs.r(s);
                        prev_t = fs.t_cont(s);
                    }
                }
            }
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let m = map(1000);
        let a = build_var_schedule(&m, 17, Variant::Quadratic).unwrap();
        let b = build_var_schedule(&m, 17, Variant::Quadratic).unwrap();
        let bits = |fs: &FastSchedule| -> Vec<u64> {
            fs.etas()
                .iter()
                .chain(fs.t_conts())
                .map(|v| v.to_bits())
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn step_as_var_identity() {
        let fs = build_step_schedule(&map(1000), 10, Variant::Linear).unwrap();
        assert!(step_as_var_equivalence(&fs).unwrap());
        let fs = build_step_schedule(&map(200), 20, Variant::Quadratic).unwrap();
        assert!(step_as_var_equivalence(&fs).unwrap());

        let mut rec = fs.to_record();
        rec.eta[2] *= 1.01;
        let perturbed = FastSchedule::from_record(rec).unwrap();
        assert!(!step_as_var_equivalence(&perturbed).unwrap());

        let var = build_var_schedule(&map(200), 5, Variant::Linear).unwrap();
        assert!(matches!(
            step_as_var_equivalence(&var),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn record_json_shape() {
        let fs = build_step_schedule(&map(200), 4, Variant::Linear).unwrap();
        let v = serde_json::to_value(&fs).unwrap();
        assert_eq!(v["kind"], "STEP_LINEAR");
        assert_eq!(v["S"], 4);
        assert_eq!(v["tau"], serde_json::json!([50, 100, 150, 200]));
        assert_eq!(v["t_cont"], serde_json::json!([50.0, 100.0, 150.0, 200.0]));

        let var = build_var_schedule(&map(200), 4, Variant::Quadratic).unwrap();
        let v = serde_json::to_value(&var).unwrap();
        assert_eq!(v["kind"], "VAR_QUADRATIC");
        assert!(v.get("tau").is_none());
        let rec: FastScheduleRecord = serde_json::from_value(v).unwrap();
        let back = FastSchedule::from_record(rec).unwrap();
        for s in 1..=4 {
            assert_eq!(back.eta(s), var.eta(s));
            assert!((back.gamma_bar(s) - var.gamma_bar(s)).abs() < 1e-15);
        }
    }
}
