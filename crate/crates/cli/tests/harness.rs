use std::fs;
use std::process::Command;

use fastdpm::fast_schedule::{Family, Variant};
use fastdpm::rng::NoiseStream;
use fastdpm::schedule::ScheduleDescriptor;
use fastdpm::toy_models::ToyRegressor;
use fastdpm::Error;
use fastdpm_cli::{row_count, run_sweep, DataSpec, ExperimentConfig, ModelChoice, SweepSampler};

fn small_config(preset: &str) -> ExperimentConfig {
    ExperimentConfig {
        schedule: ScheduleDescriptor::reference(200),
        samples_per_cell: 300,
        ..ExperimentConfig::default_for_preset(preset)
    }
}

#[test]
fn default_grid_has_twelve_rows_per_seed() {
    let mut cfg = small_config("gaussian2d");
    cfg.seeds = vec![0, 1];
    let out = run_sweep(&cfg).unwrap();
    assert_eq!(out.rows.len(), 24);
    assert_eq!(out.rows.len(), row_count(&cfg));
    for r in &out.rows {
        assert!(r.ok, "{:?}", r.reason);
        let f = r.frechet.unwrap();
        assert!(f.is_finite() && f >= 0.0, "{f}");
        assert_eq!(r.evals_per_chain, Some(r.len as u64));
        // unlabeled data has no classifier
        assert!(r.inception_score.is_none() && r.accuracy.is_none());
    }
}

#[test]
fn row_count_is_the_cartesian_product() {
    let mut cfg = small_config("gmm2");
    cfg.kinds = vec![Family::Step];
    cfg.variants = vec![Variant::Linear, Variant::Quadratic];
    cfg.lengths = vec![2, 7];
    cfg.samplers = vec![SweepSampler::DdpmRev, SweepSampler::DdimRev];
    cfg.kappas = vec![0.0, 0.5, 1.0];
    cfg.seeds = vec![3, 4, 5];
    let out = run_sweep(&cfg).unwrap();
    assert_eq!(out.rows.len(), 3 * 2 * 2 * (1 + 3));
    for r in &out.rows {
        let is = r.inception_score.unwrap();
        assert!((1.0..=2.0).contains(&is));
        let acc = r.accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn labeled_data_reports_high_accuracy() {
    let mut cfg = small_config("gmm2");
    cfg.kinds = vec![Family::Var];
    cfg.lengths = vec![50];
    cfg.samplers = vec![SweepSampler::DdpmRev];
    let out = run_sweep(&cfg).unwrap();
    let r = &out.rows[0];
    // components sit 6 standard deviations apart
    assert!(r.accuracy.unwrap() > 0.95, "{r:?}");
    assert!(r.inception_score.unwrap() > 1.8, "{r:?}");
}

#[test]
fn empty_sweep_is_rejected() {
    let mut cfg = small_config("gaussian2d");
    cfg.lengths.clear();
    assert!(matches!(run_sweep(&cfg), Err(Error::Validation(_))));
    let mut cfg = small_config("gaussian2d");
    cfg.seeds.clear();
    assert!(matches!(run_sweep(&cfg), Err(Error::Validation(_))));
}

#[test]
fn identical_configs_give_identical_bytes() {
    let cfg = small_config("gmm3");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_sweep(&cfg).unwrap().write(a.path()).unwrap();
    run_sweep(&cfg).unwrap().write(b.path()).unwrap();
    for name in ["sweep.csv", "sweep.json"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name} differs"
        );
    }
    let csv = fs::read_to_string(a.path().join("sweep.csv")).unwrap();
    let first = csv.lines().next().unwrap();
    assert_eq!(
        first,
        format!("# fastdpm-sweep/1 config_sha256={}", cfg.hash())
    );
}

#[test]
fn failing_cells_do_not_abort_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let mut st = NoiseStream::new(0, 0);
    let mut model = ToyRegressor::new(2, &[4], 200.0, &mut st);
    let huge = vec![1e200; model.param_count()];
    model.set_params(&huge).unwrap();
    let stem = dir.path().join("broken");
    model.save(&stem).unwrap();

    let mut cfg = small_config("gaussian2d");
    cfg.model = ModelChoice::Trained(stem);
    cfg.lengths = vec![5];
    let out = run_sweep(&cfg).unwrap();
    assert_eq!(out.rows.len(), row_count(&cfg));
    assert!(out.rows.iter().all(|r| !r.ok && r.reason.is_some()));
    assert!(out.to_csv().lines().nth(2).unwrap().contains(",failed,"));
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.json");
    let mut cfg = small_config("gmm2");
    cfg.data = DataSpec::Path(dir.path().join("mix.json"));
    let spec = fastdpm::toy_models::GaussianMixture::preset("gmm2")
        .unwrap()
        .to_spec();
    fs::write(
        dir.path().join("mix.json"),
        serde_json::to_string(&spec).unwrap(),
    )
    .unwrap();
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let back = ExperimentConfig::from_file(&path).unwrap();
    assert_eq!(back, cfg);
    back.validate().unwrap();
}

fn fastdpm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fastdpm"))
}

#[test]
fn cli_inspect_step_linear() {
    let out = fastdpm()
        .args([
            "inspect",
            "-T",
            "1000",
            "--kind",
            "STEP",
            "--variant",
            "linear",
            "-S",
            "10",
            "--json",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let t: Vec<f64> = v["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["t_cont"].as_f64().unwrap())
        .collect();
    assert_eq!(t, (1..=10).map(|s| 100.0 * s as f64).collect::<Vec<_>>());
    assert_eq!(v["step_as_var"], serde_json::Value::Bool(true));
}

#[test]
fn cli_inspect_var_residual_and_errors() {
    let out = fastdpm()
        .args(["inspect", "-T", "200", "--kind", "VAR", "-S", "5", "--json"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["terminal_residual"].as_f64().unwrap().abs() <= 1e-10);

    let text = fastdpm()
        .args(["inspect", "-T", "200", "--kind", "VAR", "-S", "5"])
        .output()
        .unwrap();
    assert!(String::from_utf8(text.stdout)
        .unwrap()
        .contains("terminal residual"));

    let bad = fastdpm().args(["inspect", "-S", "0"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8(bad.stderr).unwrap().contains("error"));
}

#[test]
fn cli_sample_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let out = fastdpm()
        .args([
            "sample", "-T", "200", "--preset", "gmm2", "--kind", "VAR", "-S", "20", "-n", "400",
            "--csv",
        ])
        .env("FASTDPM_OUT", dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        fs::read(dir.path().join("samples.bin")).unwrap().len(),
        400 * 2 * 8
    );
    assert!(dir.path().join("samples.csv").exists());

    let eval = fastdpm()
        .args(["evaluate", "--preset", "gmm2", "--samples"])
        .arg(dir.path().join("samples"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        eval.status.success(),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["kind"], "VAR_LINEAR");
    assert_eq!(report["S"], 20);
    assert!(report["frechet"].as_f64().unwrap() < 0.2);
    assert!(dir.path().join("metrics.csv").exists());
}

#[test]
fn cli_sweep_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    fs::write(
        &cfg_path,
        serde_json::to_string(&small_config("gaussian2d")).unwrap(),
    )
    .unwrap();
    let out = fastdpm()
        .args(["sweep", "--seed", "9", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("res"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("res/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 12);
}
