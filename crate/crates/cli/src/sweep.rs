//! The experiment grid: one row per (kind, variant, S, sampler, kappa, seed).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use fastdpm::fast_schedule::{build, FastSchedule, ScheduleKind};
use fastdpm::metrics::{accuracy, frechet_distance, inception_score};
use fastdpm::model::{CountingModel, EpsilonModel};
use fastdpm::rng::{derive_seed, NoiseStream};
use fastdpm::samplers::{
    fastdpm_ddim_rev, fastdpm_ddpm_rev, SampleBatch, SamplerConfig, SamplerKind,
};
use fastdpm::schedule::NoiseLevelMap;
use fastdpm::toy_models::{AnalyticEpsilon, GaussianMixture, ToyRegressor};
use fastdpm::Result;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelChoice, SweepSampler};

/// Version tag of the sweep CSV/JSON layout.
pub const SWEEP_SCHEMA: &str = "fastdpm-sweep/1";

pub const CSV_COLUMNS: &[&str] = &[
    "cell",
    "kind",
    "S",
    "S_effective",
    "sampler",
    "kappa",
    "seed",
    "n_samples",
    "frechet",
    "inception_score",
    "accuracy",
    "model_evals",
    "evals_per_chain",
    "normals_drawn",
    "wall_ms",
    "status",
    "reason",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub kind: ScheduleKind,
    #[serde(rename = "S")]
    pub len: usize,
    /// Length after merging colliding step indices.
    #[serde(rename = "S_effective")]
    pub len_effective: Option<usize>,
    pub sampler: SamplerKind,
    pub kappa: f64,
    pub seed: u64,
    pub n_samples: usize,
    pub frechet: Option<f64>,
    pub inception_score: Option<f64>,
    pub accuracy: Option<f64>,
    /// Noise-predictor calls for the unconditional batch.
    pub model_evals: u64,
    pub evals_per_chain: Option<u64>,
    pub normals_drawn: u64,
    pub wall_ms: Option<f64>,
    pub ok: bool,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub schema: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub rows: Vec<SweepRow>,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl SweepOutput {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# {} config_sha256={}", self.schema, self.config_hash).unwrap();
        writeln!(out, "{}", CSV_COLUMNS.join(",")).unwrap();
        for r in &self.rows {
            let cells = [
                r.cell.to_string(),
                r.kind.to_string(),
                r.len.to_string(),
                opt(&r.len_effective),
                r.sampler.to_string(),
                r.kappa.to_string(),
                r.seed.to_string(),
                r.n_samples.to_string(),
                opt(&r.frechet),
                opt(&r.inception_score),
                opt(&r.accuracy),
                r.model_evals.to_string(),
                opt(&r.evals_per_chain),
                r.normals_drawn.to_string(),
                opt(&r.wall_ms),
                if r.ok { "ok" } else { "failed" }.to_string(),
                csv_escape(r.reason.as_deref().unwrap_or("")),
            ];
            writeln!(out, "{}", cells.join(",")).unwrap();
        }
        out
    }

    /// Writes `sweep.csv` and `sweep.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("sweep.csv"), self.to_csv())?;
        fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| !r.ok).count()
    }
}

struct Cell {
    index: usize,
    kind: ScheduleKind,
    len: usize,
    sampler: SweepSampler,
    kappa: f64,
    seed: u64,
}

fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        for &family in &cfg.kinds {
            for &variant in &cfg.variants {
                for &len in &cfg.lengths {
                    for (sampler, kappa) in cfg.sampler_cells() {
                        out.push(Cell {
                            index: out.len(),
                            kind: ScheduleKind::new(family, variant),
                            len,
                            sampler,
                            kappa,
                            seed,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Everything shared by the cells of one sweep.
struct Context {
    map: NoiseLevelMap,
    mixture: GaussianMixture,
    model: Box<dyn EpsilonModel + Send>,
    /// Per-label analytic models, present when accuracy is computed.
    conditional: Option<Vec<(usize, AnalyticEpsilon)>>,
}

fn run_fast<M: EpsilonModel + ?Sized>(
    sampler: SweepSampler,
    fs: &FastSchedule,
    model: &M,
    cfg: &SamplerConfig,
) -> Result<SampleBatch> {
    match sampler {
        SweepSampler::DdpmRev => fastdpm_ddpm_rev(fs, model, cfg),
        SweepSampler::DdimRev => fastdpm_ddim_rev(fs, model, cfg),
    }
}

fn classify(gm: &GaussianMixture, samples: &[f64]) -> Result<Vec<Vec<f64>>> {
    samples
        .chunks_exact(gm.dim())
        .map(|x| gm.posterior_classifier(x))
        .collect()
}

fn run_cell(
    ctx: &Context,
    cfg: &ExperimentConfig,
    cell: &Cell,
    reference: &[f64],
    row: &mut SweepRow,
) -> Result<()> {
    let fs = build(&ctx.map, cell.kind, cell.len)?;
    row.len_effective = Some(fs.len());
    let cell_seed = derive_seed(cell.seed, cell.index as u64);
    let sampler_cfg = SamplerConfig::new(cell_seed, cfg.samples_per_cell)
        .with_kappa(cell.kappa)
        .with_final_step_noise(cfg.final_step_noise);
    let counted = CountingModel::new(&*ctx.model);
    let batch = run_fast(cell.sampler, &fs, &counted, &sampler_cfg)?;
    row.model_evals = counted.calls();
    row.evals_per_chain = Some(counted.calls() / cfg.samples_per_cell as u64);
    row.normals_drawn = batch.normals_drawn;
    row.frechet = Some(frechet_distance(&batch.samples, reference, batch.dim)?);

    if ctx.mixture.labels().is_some() {
        row.inception_score = Some(inception_score(&classify(&ctx.mixture, &batch.samples)?)?);
    }
    if let Some(conditional) = &ctx.conditional {
        let per_class = (cfg.samples_per_cell / conditional.len()).max(1);
        let (mut probs, mut labels) = (Vec::new(), Vec::new());
        for (i, (class_index, model)) in conditional.iter().enumerate() {
            let c = SamplerConfig::new(derive_seed(cell_seed, i as u64 + 1), per_class)
                .with_kappa(cell.kappa)
                .with_final_step_noise(cfg.final_step_noise);
            let b = run_fast(cell.sampler, &fs, model, &c)?;
            probs.extend(classify(&ctx.mixture, &b.samples)?);
            labels.extend(std::iter::repeat_n(*class_index, per_class));
        }
        row.accuracy = Some(accuracy(&probs, &labels)?);
    }
    Ok(())
}

/// Runs every cell of the sweep. Invalid configs fail before any sampling;
/// failures inside a cell are recorded on its row.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let map = NoiseLevelMap::new(cfg.schedule.build()?);
    let mixture = cfg.data.load()?;
    let model: Box<dyn EpsilonModel + Send> = match &cfg.model {
        ModelChoice::Analytic => Box::new(AnalyticEpsilon::new(mixture.clone(), map.clone())),
        ModelChoice::Trained(stem) => Box::new(ToyRegressor::load(stem)?),
    };
    let conditional =
        if cfg.accuracy && cfg.model == ModelChoice::Analytic && mixture.labels().is_some() {
            let models = mixture
                .label_set()
                .into_iter()
                .enumerate()
                .map(|(i, label)| {
                    Ok((
                        i,
                        AnalyticEpsilon::new(mixture.restrict_to_label(label)?, map.clone()),
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(models)
        } else {
            None
        };
    let ctx = Context {
        map,
        mixture,
        model,
        conditional,
    };

    let n_ref = cfg.reference_samples.unwrap_or(cfg.samples_per_cell);
    let references: Vec<(u64, Vec<f64>)> = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let mut st = NoiseStream::new(derive_seed(seed, u64::MAX), 0);
            (seed, ctx.mixture.sample(n_ref, &mut st).0)
        })
        .collect();

    let cells = cells(cfg);
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|cell| {
            let reference = &references.iter().find(|(s, _)| *s == cell.seed).unwrap().1;
            let mut row = SweepRow {
                cell: cell.index,
                kind: cell.kind,
                len: cell.len,
                len_effective: None,
                sampler: match cell.sampler {
                    SweepSampler::DdpmRev => SamplerKind::DdpmRev,
                    SweepSampler::DdimRev => SamplerKind::DdimRev,
                },
                kappa: cell.kappa,
                seed: cell.seed,
                n_samples: cfg.samples_per_cell,
                frechet: None,
                inception_score: None,
                accuracy: None,
                model_evals: 0,
                evals_per_chain: None,
                normals_drawn: 0,
                wall_ms: None,
                ok: true,
                reason: None,
            };
            let start = Instant::now();
            if let Err(e) = run_cell(&ctx, cfg, cell, reference, &mut row) {
                log::warn!(
                    "cell {} ({} S={}) failed: {e}",
                    cell.index,
                    cell.kind,
                    cell.len
                );
                row.ok = false;
                row.reason = Some(e.to_string());
            }
            if cfg.timing {
                row.wall_ms = Some(start.elapsed().as_secs_f64() * 1e3);
            }
            row
        })
        .collect();

    Ok(SweepOutput {
        schema: SWEEP_SCHEMA.into(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        rows,
    })
}

/// Number of rows a config produces: the product of the sweep dimensions.
pub fn row_count(cfg: &ExperimentConfig) -> usize {
    cfg.seeds.len()
        * cfg.kinds.len()
        * cfg.variants.len()
        * cfg.lengths.len()
        * cfg.sampler_cells().len()
}
