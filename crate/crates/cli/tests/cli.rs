use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cyclewarp_cli::commands::{AgeReport, FitOutput, FitSummary, SegmentStatus, SimulationMeta};
use cyclewarp_cli::io::read_csv;
use cyclewarp_core::bootstrap::{BootstrapRun, ReplicateEstimate};
use cyclewarp_core::model::Preprocessing;
use cyclewarp_core::saem::StopReason;
use cyclewarp_core::ModelParams;
use serde_json::{json, Value};
use tempfile::TempDir;

fn cyclewarp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyclewarp"))
        .args(args)
        .current_dir(dir)
        .env_remove("CYCLEWARP_THREADS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write_config(dir: &Path, name: &str, value: Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

/// Small particle counts and few iterations; enough to exercise the
/// plumbing, not to estimate well.
fn quick_config(extra: Value) -> Value {
    let mut base = json!({
        "init": { "n_particles": 200, "phase_candidates": 4 },
        "saem": { "m0": 4, "max_iter": 6, "n_particles": 200 },
        "simulate": { "n": 300 },
    });
    merge(&mut base, extra);
    base
}

fn merge(base: &mut Value, extra: Value) {
    match (base, extra) {
        (Value::Object(b), Value::Object(e)) => {
            for (k, v) in e {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, e) => *b = e,
    }
}

fn fig2_params() -> Value {
    json!({ "A": 0.6, "B": 0.4, "b": PI / 20.0, "a": 0.05, "beta": 0.07, "omega2": 0.064, "sigma2": 0.09 })
}

fn run_ok(dir: &Path, args: &[&str]) {
    let out = cyclewarp(dir, args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", json!({ "seed": 4, "simulate": { "n": 500, "params": fig2_params() } }));
    let cfg = cfg.to_str().unwrap();
    run_ok(dir.path(), &["simulate", "--config", cfg, "--out", "one"]);
    run_ok(dir.path(), &["simulate", "--config", cfg, "--out", "two"]);
    for file in ["signals.csv", "paths.csv", "truth.json"] {
        let a = fs::read(dir.path().join("one").join(file)).unwrap();
        let b = fs::read(dir.path().join("two").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let (header, rows) = read_csv(&dir.path().join("one/signals.csv")).unwrap();
    assert_eq!(header, ["segment", "x", "y"]);
    assert_eq!(rows.len(), 501);
}

#[test]
fn study_design_draws_rates_inside_the_box_and_records_seeds() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", json!({ "simulate": { "n": 200, "count": 10 } }));
    run_ok(dir.path(), &["simulate", "--seed", "9", "--out", "sim", "--config", cfg.to_str().unwrap()]);
    let meta: SimulationMeta = read_json(&dir.path().join("sim/truth.json"));
    assert_eq!(meta.master_seed, 9);
    assert_eq!(meta.simulations.len(), 10);
    let (lo, hi) = (TAU * 2.0 / 200.0, TAU * 10.0 / 200.0);
    for s in &meta.simulations {
        assert!(s.params.mean_rate > lo && s.params.mean_rate < hi, "{}", s.params.mean_rate);
        assert!(s.params.feller_holds());
    }
    let mut seeds: Vec<u64> = meta.simulations.iter().map(|s| s.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    assert_eq!(seeds.len(), 10);
}

#[test]
fn fit_bootstrap_and_aggregate_a_simulated_segment() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "c.json", quick_config(json!({ "bootstrap": { "replicates": 5 } })));
    let cfg = cfg.to_str().unwrap();
    run_ok(d, &["simulate", "--config", cfg, "--out", "sim"]);
    run_ok(d, &["fit", "--config", cfg, "--input", "sim/signals.csv", "--out", "out"]);

    let fit: FitOutput = read_json(&d.join("out/fit_0.json"));
    assert!(fit.cycles > 0.0);
    assert_eq!(fit.x.len(), 301);
    assert_eq!(fit.iterations, 6);
    for file in ["fitted_0.csv", "trace_0.csv", "diagnostics_0.csv"] {
        assert!(d.join("out").join(file).exists(), "{file}");
    }
    let (header, rows) = read_csv(&d.join("out/trace_0.csv")).unwrap();
    assert!(header.contains(&"cycles".to_string()));
    assert_eq!(rows.len(), 6);

    run_ok(d, &["bootstrap", "--config", cfg, "--out", "out"]);
    let first = fs::read(d.join("out/bootstrap_0.csv")).unwrap();
    let (_, rows) = read_csv(&d.join("out/bootstrap_0.csv")).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(d.join("out/reldiff_0.csv").exists());
    run_ok(d, &["bootstrap", "--config", cfg, "--out", "out"]);
    assert_eq!(first, fs::read(d.join("out/bootstrap_0.csv")).unwrap());

    run_ok(d, &["aggregate", "--config", cfg, "--out", "out"]);
    let report: AgeReport = read_json(&d.join("out/age_report.json"));
    assert!((report.age - fit.cycles).abs() < 1e-12);
    assert!(report.ci_low.is_some() && report.ci_high.is_some());
    let timeline = fs::read(d.join("out/timeline.csv")).unwrap();
    let age = fs::read(d.join("out/age_report.json")).unwrap();
    run_ok(d, &["aggregate", "--config", cfg, "--out", "out"]);
    assert_eq!(timeline, fs::read(d.join("out/timeline.csv")).unwrap());
    assert_eq!(age, fs::read(d.join("out/age_report.json")).unwrap());

    // every replicate fails to initialize: c_min below the allowed bound
    let bad = write_config(
        d,
        "bad.json",
        quick_config(json!({ "bootstrap": { "replicates": 5 }, "init": { "c_min": 1.0 } })),
    );
    let out = cyclewarp(d, &["bootstrap", "--config", bad.to_str().unwrap(), "--out", "out"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("5 of 5"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn twelve_segments_are_fitted_in_file_order() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "c.json", quick_config(json!({ "simulate": { "count": 12 } })));
    let cfg = cfg.to_str().unwrap();
    run_ok(d, &["simulate", "--config", cfg, "--out", "sim"]);
    run_ok(d, &["fit", "--config", cfg, "--input", "sim/signals.csv", "--out", "out"]);
    let summary: FitSummary = read_json(&d.join("out/fit_summary.json"));
    let ids: Vec<&str> = summary.segments.iter().map(|s| s.segment.as_str()).collect();
    let expected: Vec<String> = (0..12).map(|k| k.to_string()).collect();
    assert_eq!(ids, expected);
    for id in &expected {
        let fit: FitOutput = read_json(&d.join(format!("out/fit_{id}.json")));
        assert_eq!(&fit.segment, id);
    }
}

#[test]
fn non_equidistant_input_is_rejected_with_its_index() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let mut text = String::from("x,y\n");
    for i in 0..400 {
        let x = if i == 7 { 7.5 } else { i as f64 };
        text.push_str(&format!("{x},{}\n", (0.1 * x).sin()));
    }
    fs::write(d.join("bad.csv"), text).unwrap();
    let out = cyclewarp(d, &["fit", "--input", "bad.csv", "--out", "out"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(code(&out), 1, "{err}");
    assert!(err.contains("index 7"), "{err}");
    let summary: FitSummary = read_json(&d.join("out/fit_summary.json"));
    assert!(!summary.segments[0].ok);
}

fn params() -> ModelParams {
    ModelParams::new(0.6, 0.4, 0.0, 0.05, 0.1, 0.001, 0.05, 1.0)
}

/// A hand-made fit with exactly `cycles` cycles over 101 samples.
fn write_fit(out: &Path, id: &str, cycles: f64) {
    let n = 101;
    let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let g: Vec<f64> = (0..n).map(|i| TAU * cycles * i as f64 / (n - 1) as f64).collect();
    let fit = FitOutput {
        segment: id.into(),
        seed: 1,
        preprocessing: Preprocessing { ybar: None, envelope: None, normalized: false },
        init: params(),
        theta_hat: params(),
        cycles,
        converged: false,
        stop_reason: StopReason::MaxIter,
        iterations: 1,
        amplitude_ratio: Some(1.5),
        y: vec![0.0; n],
        fitted: vec![0.0; n],
        xi: vec![TAU * cycles / (n - 1) as f64; n],
        x,
        g,
    };
    fs::write(out.join(format!("fit_{id}.json")), serde_json::to_string(&fit).unwrap()).unwrap();
}

fn write_summary(out: &Path, ids: &[&str]) {
    let summary = FitSummary {
        master_seed: 1,
        segments: ids
            .iter()
            .map(|id| SegmentStatus { segment: id.to_string(), ok: true, cycles: None, error: None })
            .collect(),
    };
    fs::write(out.join("fit_summary.json"), serde_json::to_string(&summary).unwrap()).unwrap();
}

#[test]
fn single_four_cycle_segment_dates_back_four_years() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    fs::create_dir(&out).unwrap();
    write_fit(&out, "only", 4.0);
    write_summary(&out, &["only"]);
    run_ok(dir.path(), &["aggregate", "--out", "out"]);
    let report: AgeReport = read_json(&out.join("age_report.json"));
    assert!((report.age - 4.0).abs() < 1e-12);
    assert_eq!(report.headline, 4.0);
    assert!((report.first_year - 2006.0).abs() < 1e-9);
    assert_eq!(report.ci_low, None);
    let (header, rows) = read_csv(&out.join("timeline.csv")).unwrap();
    assert_eq!(header, ["segment_id", "index", "x", "y", "g", "year"]);
    assert_eq!(rows.last().unwrap()[5], "2010");

    // with bootstrap output the interval and the per-segment breakdown appear
    let run = BootstrapRun {
        replicates: 3,
        seeds: vec![1, 2, 3],
        estimates: [3.5, 4.0, 4.5]
            .iter()
            .enumerate()
            .map(|(index, &cycles)| ReplicateEstimate { index, params: params(), cycles, converged: false, iterations: 1 })
            .collect(),
        failures: vec![],
    };
    fs::write(out.join("bootstrap_only.json"), serde_json::to_string(&run).unwrap()).unwrap();
    let cfg = write_config(dir.path(), "c.json", json!({ "aggregate": { "combinations": 1000 } }));
    run_ok(dir.path(), &["aggregate", "--out", "out", "--config", cfg.to_str().unwrap()]);
    let value: Value = read_json(&out.join("age_report.json"));
    for key in ["age", "ci_low", "ci_high", "per_segment"] {
        assert!(!value[key].is_null(), "{key}");
    }
    let report: AgeReport = read_json(&out.join("age_report.json"));
    assert!(report.ci_low.unwrap() >= 3.5 && report.ci_high.unwrap() <= 4.5);
    assert_eq!(report.per_segment.len(), 1);
}

#[test]
fn aggregate_requires_every_fit() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    fs::create_dir(&out).unwrap();
    write_fit(&out, "a", 2.0);
    write_summary(&out, &["a", "b"]);
    let res = cyclewarp(dir.path(), &["aggregate", "--out", "out"]);
    assert_eq!(code(&res), 1);
    assert!(String::from_utf8_lossy(&res.stderr).contains("`b`"));
}

#[test]
fn exit_codes_separate_user_and_numerical_errors() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    // missing input
    assert_eq!(code(&cyclewarp(d, &["fit", "--out", "out"])), 1);
    // unknown config field
    let cfg = write_config(d, "c.json", json!({ "sead": 3 }));
    assert_eq!(code(&cyclewarp(d, &["simulate", "--config", cfg.to_str().unwrap()])), 1);
    // bootstrap before fit
    assert_eq!(code(&cyclewarp(d, &["bootstrap", "--out", "nothing"])), 1);
    // an all-zero signal has no envelope to normalize by
    let mut text = String::from("x,y\n");
    for i in 0..300 {
        text.push_str(&format!("{i},0\n"));
    }
    fs::write(d.join("flat.csv"), text).unwrap();
    let out = cyclewarp(d, &["fit", "--input", "flat.csv", "--out", "out"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}
