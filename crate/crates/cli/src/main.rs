use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fastdpm::fast_schedule::{build, Family, ScheduleKind, Variant};
use fastdpm::io;
use fastdpm::metrics::{accuracy, frechet_distance, inception_score, MetricReport};
use fastdpm::model::EpsilonModel;
use fastdpm::rng::{derive_seed, NoiseStream};
use fastdpm::samplers::{sample, FinalStepNoise, SamplerConfig, SamplerKind};
use fastdpm::schedule::{NoiseLevelMap, ScheduleDescriptor};
use fastdpm::toy_models::{train_toy_regressor, AnalyticEpsilon, ToyRegressor, TrainConfig};
use fastdpm::{Error, Result};
use fastdpm_cli::{inspect_schedule, run_sweep, DataSpec, ExperimentConfig};
use serde::de::DeserializeOwned;

const DEFAULT_OUT: &str = "fastdpm-out";

/// Parses a value through its serde string form, so CLI spellings match JSON configs.
fn parse_serde<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Parser)]
#[command(
    name = "fastdpm",
    version,
    about = "Fast sampling for diffusion models on toy data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the noise levels, variances and continuous steps of a fast schedule.
    Inspect(InspectArgs),
    /// Draw samples with one sampler and write them to the output directory.
    Sample(SampleArgs),
    /// Compute metrics for a sample file against the data distribution.
    Evaluate(EvaluateArgs),
    /// Run a full experiment grid and write sweep.csv / sweep.json.
    Sweep(SweepArgs),
    /// Train a toy noise regressor on a data mixture.
    Train(TrainArgs),
}

#[derive(Args, Clone)]
struct ScheduleArgs {
    /// Number of steps of the pretrained schedule.
    #[arg(short = 'T', long = "steps", default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    beta_1: f64,
    #[arg(long = "beta-T", default_value_t = 0.02)]
    beta_last: f64,
}

impl ScheduleArgs {
    fn descriptor(&self) -> ScheduleDescriptor {
        ScheduleDescriptor::new(self.beta_1, self.beta_last, self.steps)
    }
}

#[derive(Args, Clone)]
struct FastArgs {
    /// STEP or VAR.
    #[arg(long, default_value = "STEP", value_parser = parse_serde::<Family>)]
    kind: Family,
    /// linear or quadratic.
    #[arg(long, default_value = "linear", value_parser = parse_serde::<Variant>)]
    variant: Variant,
    /// Length of the fast schedule.
    #[arg(short = 'S', long = "len", default_value_t = 10)]
    len: usize,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Built-in data set: gaussian2d, gmm2 or gmm3.
    #[arg(long, default_value = "gmm2")]
    preset: String,
    /// Mixture JSON file; overrides --preset.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl DataArgs {
    fn spec(&self) -> DataSpec {
        match &self.data {
            Some(p) => DataSpec::Path(p.clone()),
            None => DataSpec::Preset(self.preset.clone()),
        }
    }
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    fast: FastArgs,
    /// Take the pretrained schedule from an experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Emit JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    fast: FastArgs,
    #[command(flatten)]
    data: DataArgs,
    /// ddpm_full, ddpm_rev or ddim_rev.
    #[arg(long, default_value = "ddpm_rev", value_parser = parse_serde::<SamplerKind>)]
    sampler: SamplerKind,
    #[arg(long, default_value_t = 0.0)]
    kappa: f64,
    /// Number of samples.
    #[arg(short = 'n', long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Saved regressor stem; the analytic predictor is used when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// zero or literal.
    #[arg(long, default_value = "zero", value_parser = parse_serde::<FinalStepNoise>)]
    final_step_noise: FinalStepNoise,
    /// Also write samples.csv.
    #[arg(long)]
    csv: bool,
    #[arg(long, env = "FASTDPM_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Sample file: a .csv or a binary dump stem.
    #[arg(long)]
    samples: PathBuf,
    /// Reference sample file; drawn from the data when absent.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// One integer class label per line, aligned with the samples.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "FASTDPM_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment config JSON; the default grid on --preset otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "gaussian2d")]
    preset: String,
    /// Run a single seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "FASTDPM_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Training hyperparameters as JSON; unspecified fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "FASTDPM_OUT")]
    out: Option<PathBuf>,
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn load_model(
    stem: Option<&Path>,
    data: &DataSpec,
    map: &NoiseLevelMap,
) -> Result<Box<dyn EpsilonModel + Send>> {
    Ok(match stem {
        Some(stem) => Box::new(ToyRegressor::load(stem)?),
        None => Box::new(AnalyticEpsilon::new(data.load()?, map.clone())),
    })
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let descriptor = match &a.config {
        Some(p) => ExperimentConfig::from_file(p)?.schedule,
        None => a.schedule.descriptor(),
    };
    let report = inspect_schedule(
        descriptor,
        ScheduleKind::new(a.fast.kind, a.fast.variant),
        a.fast.len,
    )?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.render());
    }
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let map = NoiseLevelMap::new(a.schedule.descriptor().build()?);
    let data = a.data.spec();
    let model = load_model(a.model.as_deref(), &data, &map)?;
    let fs = match a.sampler {
        SamplerKind::DdpmFull => None,
        _ => Some(build(
            &map,
            ScheduleKind::new(a.fast.kind, a.fast.variant),
            a.fast.len,
        )?),
    };
    let cfg = SamplerConfig::new(a.seed, a.n)
        .with_kappa(a.kappa)
        .with_final_step_noise(a.final_step_noise);
    let batch = sample(a.sampler, map.schedule(), fs.as_ref(), &*model, &cfg)?;
    let dir = out_dir(a.out);
    fs::create_dir_all(&dir)?;
    io::write_binary(&batch, &dir.join("samples"))?;
    if a.csv {
        io::write_csv(&batch, &dir.join("samples.csv"))?;
    }
    println!(
        "wrote {} samples to {} ({} model evaluations)",
        batch.len(),
        dir.join("samples.bin").display(),
        batch.model_evals
    );
    Ok(())
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|e| Error::Validation(format!("label {l:?}: {e}")))
        })
        .collect()
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let (samples, dim) = io::read_samples(&a.samples)?;
    let n = samples.len() / dim;
    let gm = a.data.spec().load()?;
    if gm.dim() != dim {
        return Err(Error::Validation(format!(
            "samples have dimension {dim}, data has {}",
            gm.dim()
        )));
    }
    let reference = match &a.reference {
        Some(p) => io::read_samples(p)?.0,
        None => {
            gm.sample(n, &mut NoiseStream::new(derive_seed(a.seed, u64::MAX), 0))
                .0
        }
    };
    let probs = if gm.labels().is_some() {
        Some(
            samples
                .chunks_exact(dim)
                .map(|x| gm.posterior_classifier(x))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let acc = match (&probs, &a.labels) {
        (Some(p), Some(path)) => Some(accuracy(p, &read_labels(path)?)?),
        _ => None,
    };
    let provenance = io::read_binary(&a.samples).ok().map(|b| b.provenance);
    let report = MetricReport {
        kind: provenance
            .as_ref()
            .and_then(|p| p.schedule_kind.map(|k| k.to_string()))
            .unwrap_or_else(|| "FULL".into()),
        len: provenance.as_ref().map(|p| p.len).unwrap_or(0),
        sampler: provenance
            .as_ref()
            .map(|p| p.sampler.to_string())
            .unwrap_or_default(),
        kappa: provenance.as_ref().map(|p| p.kappa).unwrap_or(f64::NAN),
        seed: provenance.as_ref().map(|p| p.seed).unwrap_or(a.seed),
        n_generated: n,
        n_reference: reference.len() / dim,
        frechet: Some(frechet_distance(&samples, &reference, dim)?),
        inception_score: probs.as_deref().map(inception_score).transpose()?,
        accuracy: acc,
    };
    let dir = out_dir(a.out);
    fs::create_dir_all(&dir)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(dir.join("metrics.json"), &json)?;
    fs::write(
        dir.join("metrics.csv"),
        format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row()),
    )?;
    println!("{json}");
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default_for_preset(&a.preset),
    };
    if let Some(seed) = a.seed {
        cfg.seeds = vec![seed];
    }
    let dir = a
        .out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let output = run_sweep(&cfg)?;
    output.write(&dir)?;
    println!(
        "{} rows ({} failed) written to {}",
        output.rows.len(),
        output.failed(),
        dir.join("sweep.csv").display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let map = NoiseLevelMap::new(a.schedule.descriptor().build()?);
    let gm = a.data.spec().load()?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(i) = a.iterations {
        cfg.iterations = i;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (model, report) = train_toy_regressor(&gm, &map, &cfg)?;
    let dir = out_dir(a.out);
    fs::create_dir_all(&dir)?;
    model.save(&dir.join("regressor"))?;
    fs::write(
        dir.join("train_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "held-out objective {:.4} -> {:.4}; model written to {}",
        report.initial_heldout,
        report.final_heldout,
        dir.join("regressor.bin").display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Inspect(a) => cmd_inspect(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Train(a) => cmd_train(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
