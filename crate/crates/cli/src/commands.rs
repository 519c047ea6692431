//! The five subcommands. Each reads and writes files under the output
//! directory; random streams are derived from the master seed by command
//! name and segment index.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cyclewarp_core::aggregate::{aggregate_paths, combine_replicates, date_observations};
use cyclewarp_core::bootstrap::{bootstrap_fitted, normal_qq, percentile_ci, rel_diff, BootstrapRun};
use cyclewarp_core::model::Preprocessing;
use cyclewarp_core::pipeline::estimate;
use cyclewarp_core::saem::{FitResult, StopReason, TraceRow};
use cyclewarp_core::simulate::{recovery_rates, sample_study_params, simulate_signal};
use cyclewarp_core::{ModelParams, Signal, Stream};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::io::{file_tag, num, read_json, read_segments, write_csv, write_json};

pub const FIT_SUMMARY: &str = "fit_summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub segment: String,
    pub seed: u64,
    pub params: ModelParams,
    pub true_cycles: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationMeta {
    pub master_seed: u64,
    pub simulations: Vec<SimulationRecord>,
}

/// Everything later commands need from a segment fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub segment: String,
    pub seed: u64,
    pub preprocessing: Preprocessing,
    pub init: ModelParams,
    pub theta_hat: ModelParams,
    pub cycles: f64,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub iterations: usize,
    /// `A / B`; absent when `B = 0`.
    pub amplitude_ratio: Option<f64>,
    pub x: Vec<f64>,
    /// Preprocessed values the model was fitted to.
    pub y: Vec<f64>,
    pub fitted: Vec<f64>,
    pub g: Vec<f64>,
    pub xi: Vec<f64>,
}

impl FitOutput {
    fn new(segment: &str, seed: u64, signal: &Signal, fit: &FitResult) -> Self {
        Self {
            segment: segment.to_string(),
            seed,
            preprocessing: signal.preproc.clone(),
            init: fit.init,
            theta_hat: fit.theta_hat,
            cycles: fit.cycles,
            converged: fit.converged,
            stop_reason: fit.stop_reason,
            iterations: fit.iterations,
            amplitude_ratio: fit.amplitude_ratio.is_finite().then_some(fit.amplitude_ratio),
            x: signal.x().to_vec(),
            y: signal.y().to_vec(),
            fitted: fit.fitted.clone(),
            g: fit.path.g.clone(),
            xi: fit.path.xi.clone(),
        }
    }

    pub fn signal(&self) -> Result<Signal> {
        Ok(Signal::new(self.x.clone(), self.y.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentStatus {
    pub segment: String,
    pub ok: bool,
    pub cycles: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub master_seed: u64,
    pub segments: Vec<SegmentStatus>,
}

fn fit_path(out: &Path, id: &str) -> PathBuf {
    out.join(format!("fit_{}.json", file_tag(id)))
}

fn bootstrap_path(out: &Path, id: &str) -> PathBuf {
    out.join(format!("bootstrap_{}.json", file_tag(id)))
}

fn params_fields(p: &ModelParams) -> Vec<String> {
    [p.amp_sin, p.amp_cos, p.phase, p.mean_rate, p.beta, p.rho, p.omega2, p.sigma2].map(num).to_vec()
}

const PARAM_COLUMNS: [&str; 8] = ["A", "B", "b", "a", "beta", "rho", "omega2", "sigma2"];

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let sc = &cfg.simulate;
    if sc.count < 1 {
        bail!("simulate.count must be at least 1");
    }
    prepare_out(&cfg.out)?;
    let master = Stream::new(cfg.seed).named("simulate");
    let mut records = Vec::with_capacity(sc.count);
    let mut signal_rows = Vec::new();
    let mut path_rows = Vec::new();
    for k in 0..sc.count {
        let s = master.child(k as u64);
        let params = match sc.params {
            Some(p) => {
                let p = p.to_params(sc.delta);
                p.validate(sc.delta)?;
                p
            }
            None => sample_study_params(sc.n, sc.delta, &sc.boxes, &mut s.named("params").rng())?,
        };
        let sim = simulate_signal(&params, sc.n, sc.delta, sc.substeps, s.named("signal"))?;
        let id = k.to_string();
        for (i, (&x, &y)) in sim.signal.x().iter().zip(sim.signal.y()).enumerate() {
            signal_rows.push(vec![id.clone(), num(x), num(y)]);
            path_rows.push(vec![id.clone(), num(x), num(sim.path.xi[i]), num(sim.path.g[i])]);
        }
        records.push(SimulationRecord { segment: id, seed: s.key(), params, true_cycles: sim.true_cycles() });
    }
    write_csv(&cfg.out.join("signals.csv"), &["segment", "x", "y"], signal_rows)?;
    write_csv(&cfg.out.join("paths.csv"), &["segment", "x", "xi", "g"], path_rows)?;
    write_json(&cfg.out.join("truth.json"), &SimulationMeta { master_seed: cfg.seed, simulations: records })?;
    Ok(())
}

fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut header = vec!["iteration"];
    header.extend(PARAM_COLUMNS);
    header.extend([
        "S1", "S2", "S3", "S4", "s1", "s2", "s3", "s4", "alpha", "half_width", "loglik", "cycles", "min_ess", "max_rel_change",
        "warnings",
    ]);
    let rows = trace.iter().map(|t| {
        let mut row = vec![t.iteration.to_string()];
        row.extend(params_fields(&t.params));
        match &t.raw {
            Some(r) => row.extend([r.s1, r.s2, r.s3, r.s4].map(num)),
            None => row.extend(std::iter::repeat_n(String::new(), 4)),
        }
        let s = &t.smoothed;
        row.extend([s.s1, s.s2, s.s3, s.s4, t.alpha, t.half_width, t.loglik, t.cycles, t.min_ess, t.max_rel_change].map(num));
        row.push(t.warnings.join("; "));
        row
    });
    write_csv(path, &header, rows)
}

pub fn fit(cfg: &RunConfig) -> Result<()> {
    let input = cfg.input.as_ref().ok_or_else(|| anyhow!("fit needs an input file (--input or \"input\" in the config)"))?;
    let segments = read_segments(input)?;
    prepare_out(&cfg.out)?;
    let master = Stream::new(cfg.seed).named("fit");
    let est_cfg = cfg.estimate();
    let mut statuses = Vec::with_capacity(segments.len());
    let mut first_error: Option<anyhow::Error> = None;
    for (k, seg) in segments.iter().enumerate() {
        let stream = master.child(k as u64);
        let outcome = Signal::new(seg.x.clone(), seg.y.clone())
            .with_context(|| format!("segment `{}` starting at line {}", seg.id, seg.first_line))
            .and_then(|raw| estimate(&raw, &est_cfg, stream).map_err(anyhow::Error::from));
        match outcome {
            Ok(est) => {
                let tag = file_tag(&seg.id);
                let out = FitOutput::new(&seg.id, stream.key(), &est.signal, &est.fit);
                write_json(&fit_path(&cfg.out, &seg.id), &out)?;
                write_csv(
                    &cfg.out.join(format!("fitted_{tag}.csv")),
                    &["x", "y", "yhat", "g", "xi"],
                    (0..out.x.len()).map(|i| [out.x[i], out.y[i], out.fitted[i], out.g[i], out.xi[i]].map(num).to_vec()),
                )?;
                write_trace(&cfg.out.join(format!("trace_{tag}.csv")), &est.fit.trace)?;
                let residuals = est.fit.residuals(&est.signal);
                let qq = normal_qq(&residuals, est.fit.theta_hat.sigma2.sqrt());
                write_csv(
                    &cfg.out.join(format!("diagnostics_{tag}.csv")),
                    &["index", "x", "residual", "qq_theoretical", "qq_empirical"],
                    (0..residuals.len()).map(|i| {
                        vec![i.to_string(), num(out.x[i]), num(residuals[i]), num(qq[i].0), num(qq[i].1)]
                    }),
                )?;
                eprintln!("segment {}: {:.3} cycles ({} iterations)", seg.id, out.cycles, out.iterations);
                statuses.push(SegmentStatus { segment: seg.id.clone(), ok: true, cycles: Some(out.cycles), error: None });
            }
            Err(e) => {
                eprintln!("segment {}: {e:#}", seg.id);
                statuses.push(SegmentStatus {
                    segment: seg.id.clone(),
                    ok: false,
                    cycles: None,
                    error: Some(format!("{e:#}")),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    let failed = statuses.iter().filter(|s| !s.ok).count();
    write_json(&cfg.out.join(FIT_SUMMARY), &FitSummary { master_seed: cfg.seed, segments: statuses })?;
    match first_error {
        Some(e) => Err(e.context(format!("{failed} of {} segments failed", segments.len()))),
        None => Ok(()),
    }
}

fn load_summary(out: &Path) -> Result<FitSummary> {
    let path = out.join(FIT_SUMMARY);
    if !path.exists() {
        bail!("{} not found; run `fit` first", path.display());
    }
    read_json(&path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub segment: String,
    pub replicates: usize,
    pub failures: usize,
    pub cycles: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
}

pub fn bootstrap(cfg: &RunConfig) -> Result<()> {
    let summary = load_summary(&cfg.out)?;
    let master = Stream::new(cfg.seed).named("bootstrap");
    let bcfg = cfg.bootstrap();
    let mut reports = Vec::new();
    for (k, status) in summary.segments.iter().enumerate() {
        if !status.ok {
            bail!("segment `{}` has no fit; refit it before bootstrapping", status.segment);
        }
        let fit_file = fit_path(&cfg.out, &status.segment);
        let fit: FitOutput = read_json(&fit_file).with_context(|| format!("missing fit for segment `{}`", status.segment))?;
        let signal = fit.signal()?;
        let run = bootstrap_fitted(&signal, &fit.fitted, &fit.theta_hat, &bcfg, master.child(k as u64))
            .with_context(|| format!("segment `{}`", status.segment))?;
        let tag = file_tag(&status.segment);
        write_json(&bootstrap_path(&cfg.out, &status.segment), &run)?;
        write_replicates(&cfg.out.join(format!("bootstrap_{tag}.csv")), &run)?;
        let mut header = vec!["replicate"];
        header.extend(PARAM_COLUMNS);
        header.push("cycles");
        write_csv(
            &cfg.out.join(format!("reldiff_{tag}.csv")),
            &header,
            run.estimates.iter().map(|e| {
                let d = rel_diff(&fit.theta_hat, fit.cycles, e);
                let mut row = vec![e.index.to_string()];
                row.extend(
                    [d.amp_sin, d.amp_cos, d.phase, d.mean_rate, d.beta, d.rho, d.omega2, d.sigma2, d.cycles].map(num),
                );
                row
            }),
        )?;
        let level = cfg.aggregate.level;
        let (lo, hi) = percentile_ci(&run.cycles(), level)?;
        eprintln!(
            "segment {}: cycles {:.3}, {:.0}% interval [{lo:.3}, {hi:.3}], {} failed replicates",
            status.segment,
            fit.cycles,
            100.0 * level,
            run.failures.len()
        );
        reports.push(BootstrapSummary {
            segment: status.segment.clone(),
            replicates: run.replicates,
            failures: run.failures.len(),
            cycles: fit.cycles,
            ci_low: lo,
            ci_high: hi,
            level,
        });
    }
    write_json(&cfg.out.join("bootstrap_summary.json"), &reports)
}

fn write_replicates(path: &Path, run: &BootstrapRun) -> Result<()> {
    let mut header = vec!["replicate", "seed", "ok"];
    header.extend(PARAM_COLUMNS);
    header.extend(["cycles", "converged", "iterations", "error"]);
    let mut rows: Vec<(usize, Vec<String>)> = run
        .estimates
        .iter()
        .map(|e| {
            let mut row = vec![e.index.to_string(), run.seeds[e.index].to_string(), "true".into()];
            row.extend(params_fields(&e.params));
            row.extend([num(e.cycles), e.converged.to_string(), e.iterations.to_string(), String::new()]);
            (e.index, row)
        })
        .collect();
    for f in &run.failures {
        let mut row = vec![f.index.to_string(), run.seeds[f.index].to_string(), "false".into()];
        row.extend(std::iter::repeat_n(String::new(), PARAM_COLUMNS.len() + 3));
        row.push(f.error.clone());
        rows.push((f.index, row));
    }
    rows.sort_by_key(|r| r.0);
    write_csv(path, &header, rows.into_iter().map(|r| r.1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAge {
    pub segment: String,
    pub cycles: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeReport {
    pub death_year: f64,
    /// Age in cycles from the aggregated estimate.
    pub age: f64,
    /// `age` rounded half to even.
    pub headline: f64,
    pub first_year: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub level: f64,
    pub combinations: Option<usize>,
    pub per_segment: Vec<SegmentAge>,
}

pub fn aggregate(cfg: &RunConfig) -> Result<()> {
    let summary = load_summary(&cfg.out)?;
    let ac = &cfg.aggregate;
    let mut fits = Vec::with_capacity(summary.segments.len());
    for status in &summary.segments {
        if !status.ok {
            bail!("segment `{}` is missing a fit", status.segment);
        }
        let fit: FitOutput = read_json(&fit_path(&cfg.out, &status.segment))
            .with_context(|| format!("missing fit for segment `{}`", status.segment))?;
        fits.push(fit);
    }
    let paths: Vec<&[f64]> = fits.iter().map(|f| f.g.as_slice()).collect();
    let agg = aggregate_paths(&paths)?;
    let years = date_observations(&agg, ac.death_year);

    let mut rows = Vec::with_capacity(agg.g.len());
    for (j, f) in fits.iter().enumerate() {
        let off = agg.offsets[j];
        for i in 0..f.x.len() {
            let k = off + i;
            rows.push(vec![f.segment.clone(), i.to_string(), num(f.x[i]), num(f.y[i]), num(agg.g[k]), num(years[k])]);
        }
    }
    write_csv(&cfg.out.join("timeline.csv"), &["segment_id", "index", "x", "y", "g", "year"], rows)?;

    let mut runs = Vec::with_capacity(fits.len());
    for f in &fits {
        let p = bootstrap_path(&cfg.out, &f.segment);
        if p.exists() {
            runs.push(Some(read_json::<BootstrapRun>(&p)?));
        } else if ac.require_ci {
            bail!("segment `{}` has no bootstrap output; run `bootstrap` first", f.segment);
        } else {
            runs.push(None);
        }
    }
    let mut per_segment = Vec::with_capacity(fits.len());
    for (f, run) in fits.iter().zip(&runs) {
        let ci = match run {
            Some(r) if !r.estimates.is_empty() => Some(percentile_ci(&r.cycles(), ac.level)?),
            _ => None,
        };
        per_segment.push(SegmentAge {
            segment: f.segment.clone(),
            cycles: f.cycles,
            ci_low: ci.map(|c| c.0),
            ci_high: ci.map(|c| c.1),
        });
    }
    let (ci, combinations) = if runs.iter().all(|r| r.is_some()) {
        let reps: Vec<Vec<f64>> = runs.iter().flatten().map(|r| r.cycles()).collect();
        let sums = combine_replicates(&reps, ac.combinations, Stream::new(cfg.seed).named("aggregate"))?;
        (Some(percentile_ci(&sums, ac.level)?), Some(ac.combinations))
    } else {
        (None, None)
    };
    let report = AgeReport {
        death_year: ac.death_year,
        age: agg.age,
        headline: agg.age.round_ties_even(),
        first_year: years[0],
        ci_low: ci.map(|c| c.0),
        ci_high: ci.map(|c| c.1),
        level: ac.level,
        combinations,
        per_segment,
    };
    match ci {
        Some((lo, hi)) => eprintln!("age {:.2} cycles ({:.0}% interval {lo:.2} to {hi:.2})", report.age, 100.0 * ac.level),
        None => eprintln!("age {:.2} cycles (no bootstrap interval)", report.age),
    }
    write_json(&cfg.out.join("age_report.json"), &report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub signals: usize,
    pub n: usize,
    pub fitted: usize,
    pub within_1: f64,
    pub within_3: f64,
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    let bc = &cfg.bench;
    if bc.signals < 1 || bc.n < 2 {
        bail!("bench needs at least one signal and n >= 2");
    }
    prepare_out(&cfg.out)?;
    let master = Stream::new(cfg.seed).named("bench");
    let delta = cfg.simulate.delta;
    let est_cfg = cfg.estimate();
    let mut rows = Vec::with_capacity(bc.signals);
    let mut errors = Vec::with_capacity(bc.signals);
    for k in 0..bc.signals {
        let s = master.child(k as u64);
        let params = sample_study_params(bc.n, delta, &cfg.simulate.boxes, &mut s.named("params").rng())?;
        let sim = simulate_signal(&params, bc.n, delta, cfg.simulate.substeps, s.named("signal"))?;
        let truth = sim.true_cycles();
        match estimate(&sim.signal, &est_cfg, s.named("fit")) {
            Ok(est) => {
                let err = est.fit.cycles - truth;
                errors.push(err);
                eprintln!("signal {k}: true {truth:.3}, estimate {:.3}", est.fit.cycles);
                rows.push(vec![k.to_string(), s.key().to_string(), num(truth), num(est.fit.cycles), num(err), String::new()]);
            }
            Err(e) => {
                // a failed fit counts as a miss
                errors.push(f64::INFINITY);
                eprintln!("signal {k}: fit failed: {e}");
                rows.push(vec![k.to_string(), s.key().to_string(), num(truth), String::new(), String::new(), e.to_string()]);
            }
        }
    }
    write_csv(&cfg.out.join("bench.csv"), &["signal", "seed", "true_cycles", "estimate", "error", "failure"], rows)?;
    let (w1, w3) = recovery_rates(&errors);
    let report = BenchReport {
        signals: bc.signals,
        n: bc.n,
        fitted: errors.iter().filter(|e| e.is_finite()).count(),
        within_1: w1,
        within_3: w3,
    };
    println!("within 1 cycle: {:.1}%", 100.0 * w1);
    println!("within 3 cycles: {:.1}%", 100.0 * w3);
    write_json(&cfg.out.join("bench.json"), &report)
}
