//! Human-readable and JSON dumps of a fast schedule.

use std::fmt::Write as _;

use fastdpm::fast_schedule::{build, step_as_var_equivalence, Family, ScheduleKind};
use fastdpm::schedule::{NoiseLevelMap, ScheduleDescriptor};
use fastdpm::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectRow {
    pub s: usize,
    pub r: f64,
    pub eta: f64,
    pub eta_tilde: f64,
    pub gamma_bar: f64,
    pub t_cont: f64,
    pub tau: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub schedule: ScheduleDescriptor,
    pub kind: ScheduleKind,
    #[serde(rename = "S")]
    pub len: usize,
    /// `c` of the construction (`T / S` or `0.8 T / S^2` for STEP, solved for VAR).
    pub constant: Option<f64>,
    pub rows: Vec<InspectRow>,
    /// STEP only: accumulated `gamma_s` reproduces `alpha_bar_{tau_s}`.
    pub step_as_var: Option<bool>,
    /// `ln prod(1 - eta_s) - ln alpha_bar_T`.
    pub terminal_residual: f64,
}

pub fn inspect_schedule(
    descriptor: ScheduleDescriptor,
    kind: ScheduleKind,
    len: usize,
) -> Result<InspectReport> {
    let sched = descriptor.build()?;
    let target = sched.log_alpha_bar(sched.steps());
    let map = NoiseLevelMap::new(sched);
    let fs = build(&map, kind, len)?;
    let rows = (1..=fs.len())
        .map(|s| InspectRow {
            s,
            r: fs.r(s),
            eta: fs.eta(s),
            eta_tilde: fs.eta_tilde(s),
            gamma_bar: fs.gamma_bar(s),
            t_cont: fs.t_cont(s),
            tau: fs.tau().map(|t| t[s - 1]),
        })
        .collect();
    let step_as_var = match kind.family() {
        Family::Step => Some(step_as_var_equivalence(&fs)?),
        Family::Var => None,
    };
    Ok(InspectReport {
        schedule: descriptor,
        kind,
        len: fs.len(),
        constant: fs.constant(),
        rows,
        step_as_var,
        terminal_residual: fs.log_terminal_product() - target,
    })
}

impl InspectReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{} with S = {} on beta_1 = {}, beta_T = {}, T = {}",
            self.kind, self.len, self.schedule.beta_1, self.schedule.beta_t, self.schedule.steps
        )
        .unwrap();
        if let Some(c) = self.constant {
            writeln!(out, "constant c = {c}").unwrap();
        }
        writeln!(
            out,
            "{:>5} {:>14} {:>14} {:>14} {:>14} {:>16} {:>6}",
            "s", "r_s", "eta_s", "eta_tilde_s", "gamma_bar_s", "t_cont_s", "tau_s"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{:>5} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e} {:>16.9} {:>6}",
                r.s,
                r.r,
                r.eta,
                r.eta_tilde,
                r.gamma_bar,
                r.t_cont,
                r.tau.map(|t| t.to_string()).unwrap_or_else(|| "-".into())
            )
            .unwrap();
        }
        if let Some(ok) = self.step_as_var {
            writeln!(
                out,
                "STEP-as-VAR check: {}",
                if ok { "pass" } else { "FAIL" }
            )
            .unwrap();
        }
        writeln!(out, "terminal residual: {:.3e}", self.terminal_residual).unwrap();
        out
    }
}
