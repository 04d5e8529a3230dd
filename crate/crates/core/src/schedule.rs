//! Linear variance schedules and the map between continuous diffusion steps
//! and noise levels.
//!
//! For a linear schedule `beta_i = beta_1 + (i - 1) * delta_beta` the
//! cumulative product `alpha_bar_t` factors into Gamma functions,
//!
//! ```text
//! alpha_bar_t = delta_beta^t * Gamma(beta_hat + 1) / Gamma(beta_hat - t + 1),
//! beta_hat    = (1 - beta_1) / delta_beta,
//! ```
//!
//! which is defined for every real `t < beta_hat + 1`. The noise level is
//! `R(t) = sqrt(alpha_bar_t)`, strictly decreasing from `R(0) = 1`, and its
//! inverse `T(r)` turns any noise level back into a continuous step.
//!
//! All Gamma arithmetic is done in the log domain: `Gamma(beta_hat + 1)`
//! overflows for the usual `beta_hat ~ 5e4`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On-disk form of a linear schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDescriptor {
    pub beta_1: f64,
    #[serde(rename = "beta_T")]
    pub beta_t: f64,
    #[serde(rename = "T")]
    pub steps: usize,
}

impl ScheduleDescriptor {
    pub fn new(beta_1: f64, beta_t: f64, steps: usize) -> Self {
        Self {
            beta_1,
            beta_t,
            steps,
        }
    }

    /// `beta_1 = 1e-4`, `beta_T = 0.02` over `steps` steps.
    pub fn reference(steps: usize) -> Self {
        Self::new(1e-4, 0.02, steps)
    }

    pub fn build(&self) -> Result<VarianceSchedule> {
        VarianceSchedule::new(self.beta_1, self.beta_t, self.steps)
    }
}

/// A linearly interpolated variance schedule and its derived constants.
///
/// Public accessors use 1-based step indices; `alpha_bar(0) == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    beta_1: f64,
    beta_t: f64,
    steps: usize,
    delta_beta: f64,
    beta_hat: f64,
    betas: Vec<f64>,
    // Index 0 holds step 0 (the empty product).
    alpha_bars: Vec<f64>,
    log_alpha_bars: Vec<f64>,
    beta_tildes: Vec<f64>,
}

impl VarianceSchedule {
    pub fn new(beta_1: f64, beta_t: f64, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Schedule(format!(
                "need at least 2 diffusion steps, got {steps}"
            )));
        }
        if !(beta_1 > 0.0 && beta_1 < beta_t && beta_t < 1.0) {
            return Err(Error::Schedule(format!(
                "require 0 < beta_1 < beta_T < 1, got beta_1 = {beta_1}, beta_T = {beta_t}"
            )));
        }
        let delta_beta = (beta_t - beta_1) / (steps - 1) as f64;
        let beta_hat = (1.0 - beta_1) / delta_beta;
        if beta_hat <= steps as f64 {
            return Err(Error::Schedule(format!(
                "beta_hat = {beta_hat} must exceed T = {steps}"
            )));
        }

        let betas: Vec<f64> = (0..steps).map(|i| beta_1 + i as f64 * delta_beta).collect();

        let mut alpha_bars = Vec::with_capacity(steps + 1);
        let mut log_alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        log_alpha_bars.push(0.0);
        let (mut prod, mut log_sum) = (1.0, 0.0);
        for &b in &betas {
            prod *= 1.0 - b;
            log_sum += (-b).ln_1p();
            alpha_bars.push(prod);
            log_alpha_bars.push(log_sum);
        }

        let beta_tildes = (1..=steps)
            .map(|t| {
                if t == 1 {
                    betas[0]
                } else {
                    (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t - 1]
                }
            })
            .collect();

        Ok(Self {
            beta_1,
            beta_t,
            steps,
            delta_beta,
            beta_hat,
            betas,
            alpha_bars,
            log_alpha_bars,
            beta_tildes,
        })
    }

    pub fn descriptor(&self) -> ScheduleDescriptor {
        ScheduleDescriptor::new(self.beta_1, self.beta_t, self.steps)
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_1(&self) -> f64 {
        self.beta_1
    }

    pub fn beta_last(&self) -> f64 {
        self.beta_t
    }

    pub fn delta_beta(&self) -> f64 {
        self.delta_beta
    }

    pub fn beta_hat(&self) -> f64 {
        self.beta_hat
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// Cumulative product for `0 <= t <= T`, read from the precomputed table.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `ln alpha_bar_t` accumulated as a sum of `ln(1 - beta_i)`.
    pub fn log_alpha_bar(&self, t: usize) -> f64 {
        self.log_alpha_bars[t]
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tildes[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `prod_{i <= t} (1 - beta_i)`, checked for `1 <= t <= T`.
    pub fn alpha_bar_product(&self, t: usize) -> Result<f64> {
        if t < 1 || t > self.steps {
            return Err(Error::Range {
                what: "t",
                value: t as f64,
                lo: 1.0,
                hi: self.steps as f64,
            });
        }
        Ok(self.alpha_bars[t])
    }

    /// `ln alpha_bar` summed directly over the integer steps `from+1 ..= to`.
    pub(crate) fn log_alpha_ratio(&self, from: usize, to: usize) -> f64 {
        self.betas[from..to].iter().map(|&b| (-b).ln_1p()).sum()
    }
}

/// Result of inverting the noise-level map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inversion {
    pub step: f64,
    pub iterations: usize,
    /// `2 ln R(step) - 2 ln r` at the returned step.
    pub residual: f64,
}

/// Bijection between continuous steps `t in [0, T]` and noise levels `r`.
#[derive(Debug, Clone)]
pub struct NoiseLevelMap {
    schedule: VarianceSchedule,
    tolerance: f64,
    max_iters: usize,
    log_delta_beta: f64,
    log_gamma_top: f64,
    log1m_beta_1: f64,
}

impl NoiseLevelMap {
    pub const DEFAULT_TOLERANCE: f64 = 1e-10;
    pub const DEFAULT_MAX_ITERS: usize = 100;
    // Newton corrections below this (in steps) count as converged.
    const STEP_TOLERANCE: f64 = 1e-9;

    pub fn new(schedule: VarianceSchedule) -> Self {
        Self::with_tolerance(schedule, Self::DEFAULT_TOLERANCE, Self::DEFAULT_MAX_ITERS)
    }

    pub fn with_tolerance(schedule: VarianceSchedule, tolerance: f64, max_iters: usize) -> Self {
        let log_delta_beta = schedule.delta_beta.ln();
        let log_gamma_top = libm::lgamma(schedule.beta_hat + 1.0);
        let log1m_beta_1 = (-schedule.beta_1).ln_1p();
        Self {
            schedule,
            tolerance,
            max_iters: max_iters.max(1),
            log_delta_beta,
            log_gamma_top,
            log1m_beta_1,
        }
    }

    pub fn schedule(&self) -> &VarianceSchedule {
        &self.schedule
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn max_iters(&self) -> usize {
        self.max_iters
    }

    fn check_step(&self, t: f64) -> Result<()> {
        let hi = self.schedule.steps as f64;
        if !(0.0..=hi).contains(&t) {
            return Err(Error::Range {
                what: "t",
                value: t,
                lo: 0.0,
                hi,
            });
        }
        Ok(())
    }

    /// `2 ln R(t)` through log-Gamma, for `t in [0, T]`.
    pub fn log_alpha_bar_gamma(&self, t: f64) -> Result<f64> {
        self.check_step(t)?;
        if t == 0.0 {
            return Ok(0.0);
        }
        let bh = self.schedule.beta_hat;
        Ok(t * self.log_delta_beta + self.log_gamma_top - libm::lgamma(bh - t + 1.0))
    }

    /// Noise level `R(t)` evaluated through log-Gamma.
    pub fn noise_level_gamma(&self, t: f64) -> Result<f64> {
        Ok((0.5 * self.log_alpha_bar_gamma(t)?).exp())
    }

    /// `alpha_bar` at a continuous step, `R(t)^2`.
    pub fn alpha_bar_at(&self, t: f64) -> Result<f64> {
        Ok(self.log_alpha_bar_gamma(t)?.exp())
    }

    /// `2 ln R(t)` from the Stirling series of both Gamma factors, with the
    /// `O(beta_hat^-3)` terms dropped.
    ///
    /// The difference of the two `(z + 1/2) ln z` terms is rearranged around
    /// `ln_1p(-t / beta_hat)`, which keeps the result accurate to ~1e-13 even
    /// though each term alone is of order `beta_hat ln beta_hat`.
    pub fn log_noise_level_stirling(&self, t: f64) -> Result<f64> {
        let bh = self.schedule.beta_hat;
        if t >= bh {
            return Err(Error::Domain(format!(
                "Stirling form needs t < beta_hat = {bh}, got {t}"
            )));
        }
        if !(t >= 0.0) {
            return Err(Error::Range {
                what: "t",
                value: t,
                lo: 0.0,
                hi: bh,
            });
        }
        let rest = bh - t;
        Ok(t * self.log1m_beta_1 - (rest + 0.5) * (-t / bh).ln_1p() - t
            + (1.0 / bh - 1.0 / rest) / 12.0)
    }

    fn stirling_slope(&self, t: f64) -> f64 {
        let bh = self.schedule.beta_hat;
        let rest = bh - t;
        self.log1m_beta_1 + (-t / bh).ln_1p() + 0.5 / rest - 1.0 / (12.0 * rest * rest)
    }

    /// Continuous step `T(r)` for a noise level `R(T) <= r <= 1`.
    pub fn step_of_noise_level(&self, r: f64) -> Result<f64> {
        self.invert(r).map(|inv| inv.step)
    }

    /// Inverts `R` with a bracketed search on the Stirling form of `2 ln R`.
    ///
    /// The initial bracket `[t0, t0 + 1]` comes from bisecting the stored
    /// `alpha_bar` table for `alpha_bar_{t0+1} <= r^2 <= alpha_bar_{t0}`.
    /// Inside it, Newton steps are taken whenever they stay in the bracket and
    /// bisection steps otherwise; the bracket shrinks on every evaluation.
    pub fn invert(&self, r: f64) -> Result<Inversion> {
        let steps = self.schedule.steps;
        let r_min = self.schedule.alpha_bar(steps).sqrt();
        // r values that only miss the range by rounding are clamped onto it.
        let slack = 1e-12;
        if !(r > r_min * (1.0 - slack) && r <= 1.0 + slack) {
            return Err(Error::Range {
                what: "r",
                value: r,
                lo: r_min,
                hi: 1.0,
            });
        }
        if r >= 1.0 {
            return Ok(Inversion {
                step: 0.0,
                iterations: 0,
                residual: 0.0,
            });
        }
        let target = 2.0 * r.ln();
        let la = &self.schedule.log_alpha_bars;
        if target <= la[steps] {
            return Ok(Inversion {
                step: steps as f64,
                iterations: 0,
                residual: self.log_noise_level_stirling(steps as f64)? - target,
            });
        }

        // First index whose log alpha_bar is below the target; the table is
        // strictly decreasing so this is a bisection.
        let above = la.partition_point(|&v| v >= target);
        let t0 = above.saturating_sub(1).min(steps - 1);
        let g = |t: f64| self.log_noise_level_stirling(t).map(|v| v - target);

        let mut lo = t0 as f64;
        let mut hi = lo + 1.0;
        let mut g_lo = g(lo)?;
        let mut g_hi = g(hi)?;
        // Table and Stirling form can disagree in the last few ulps right at
        // an integer boundary.
        if g_lo < 0.0 && lo > 0.0 {
            lo -= 1.0;
            g_lo = g(lo)?;
        }
        if g_hi > 0.0 && hi < steps as f64 {
            hi += 1.0;
            g_hi = g(hi)?;
        }
        for (t, gt) in [(lo, g_lo), (hi, g_hi)] {
            if gt.abs() <= 1e-3 * self.tolerance {
                return Ok(Inversion {
                    step: t,
                    iterations: 0,
                    residual: gt,
                });
            }
        }

        let mut t = 0.5 * (lo + hi);
        let mut residual = f64::INFINITY;
        for iter in 1..=self.max_iters {
            residual = g(t)?;
            if residual > 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let newton = residual / self.stirling_slope(t);
            if residual.abs() <= self.tolerance && newton.abs() <= Self::STEP_TOLERANCE {
                return Ok(Inversion {
                    step: t,
                    iterations: iter,
                    residual,
                });
            }
            let candidate = t - newton;
            t = if candidate > lo && candidate < hi {
                candidate
            } else {
                0.5 * (lo + hi)
            };
        }
        Err(Error::Convergence {
            what: "continuous step",
            iters: self.max_iters,
            residual,
        })
    }
}
