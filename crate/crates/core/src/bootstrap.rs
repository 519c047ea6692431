//! Residual bootstrap of a fitted signal and residual diagnostics.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::init::{initialize, InitConfig};
use crate::model::{arc_distance, ModelParams, Signal};
use crate::rng::Stream;
use crate::saem::{fit, FitResult, SaemConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub init: InitConfig,
    pub saem: SaemConfig,
    /// Start every refit at the original estimate instead of
    /// re-initializing from the replicate signal.
    pub warm_start: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { replicates: 100, init: InitConfig::default(), saem: SaemConfig::default(), warm_start: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimate {
    pub index: usize,
    pub params: ModelParams,
    pub cycles: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub index: usize,
    pub error: String,
}

/// Replicate refits. `estimates` and `failures` together hold one entry
/// per replicate, each sorted by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRun {
    pub replicates: usize,
    /// Stream key of each replicate, by index.
    pub seeds: Vec<u64>,
    pub estimates: Vec<ReplicateEstimate>,
    pub failures: Vec<ReplicateFailure>,
}

impl BootstrapRun {
    pub fn cycles(&self) -> Vec<f64> {
        self.estimates.iter().map(|e| e.cycles).collect()
    }
}

/// Replicate signal `fitted + r*` with `r*` drawn with replacement from
/// the residuals.
pub fn replicate_signal<R: Rng + ?Sized>(signal: &Signal, fitted: &[f64], residuals: &[f64], rng: &mut R) -> Signal {
    let n = residuals.len();
    let y = fitted.iter().map(|f| f + residuals[rng.random_range(0..n)]).collect();
    signal.with_values(y)
}

/// Refits `config.replicates` residual-resampled copies of `signal`
/// (the preprocessed signal `fit` was computed on). Replicates run in
/// parallel; each draws from its own child of `stream`.
pub fn residual_bootstrap(
    signal: &Signal,
    fitted: &FitResult,
    config: &BootstrapConfig,
    stream: Stream,
) -> Result<BootstrapRun> {
    bootstrap_fitted(signal, &fitted.fitted, &fitted.theta_hat, config, stream)
}

/// [`residual_bootstrap`] from the fitted values and estimate alone.
pub fn bootstrap_fitted(
    signal: &Signal,
    fitted: &[f64],
    theta_hat: &ModelParams,
    config: &BootstrapConfig,
    stream: Stream,
) -> Result<BootstrapRun> {
    let m = config.replicates;
    if m < 1 {
        return Err(Error::Config("at least one bootstrap replicate is required".into()));
    }
    if fitted.len() != signal.len() {
        return Err(Error::InvalidSignal("fit and signal lengths differ".into()));
    }
    let residuals: Vec<f64> = signal.y().iter().zip(fitted).map(|(y, f)| y - f).collect();
    let seeds: Vec<u64> = (0..m).map(|i| stream.child(i as u64).key()).collect();
    let outcomes: Vec<Result<FitResult>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let s = stream.child(i as u64);
            let rep = replicate_signal(signal, fitted, &residuals, &mut s.named("resample").rng());
            let init = if config.warm_start {
                *theta_hat
            } else {
                initialize(&rep, &config.init, config.saem.quadrature, s.named("init"))?
            };
            fit(&rep, &config.saem, &init, s.named("fit"))
        })
        .collect();

    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    for (index, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(f) => estimates.push(ReplicateEstimate {
                index,
                params: f.theta_hat,
                cycles: f.cycles,
                converged: f.converged,
                iterations: f.iterations,
            }),
            Err(e) => failures.push(ReplicateFailure { index, error: e.to_string() }),
        }
    }
    if 2 * failures.len() > m {
        return Err(Error::BootstrapFailed { failed: failures.len(), total: m });
    }
    Ok(BootstrapRun { replicates: m, seeds, estimates, failures })
}

/// Sample quantile with linear interpolation between order statistics
/// (`h = (N - 1) p`).
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Equal-tailed percentile interval at `level`.
pub fn percentile_ci(values: &[f64], level: f64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Config("percentile interval of an empty sample".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("level must lie in (0, 1), got {level}")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Config("percentile interval of a sample containing NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    Ok((quantile_type7(&sorted, tail), quantile_type7(&sorted, 1.0 - tail)))
}

/// Plotting positions `(i - a) / (n + 1 - 2a)`, `a = 3/8` for `n <= 10`
/// and `1/2` otherwise.
pub fn ppoints(n: usize) -> Vec<f64> {
    let a = if n <= 10 { 0.375 } else { 0.5 };
    (1..=n).map(|i| (i as f64 - a) / (n as f64 + 1.0 - 2.0 * a)).collect()
}

/// Relative differences of one replicate from the original estimate.
/// The phase entry is the shortest arc divided by `pi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelDiff {
    pub index: usize,
    #[serde(rename = "A")]
    pub amp_sin: f64,
    #[serde(rename = "B")]
    pub amp_cos: f64,
    #[serde(rename = "b")]
    pub phase: f64,
    #[serde(rename = "a")]
    pub mean_rate: f64,
    pub beta: f64,
    pub rho: f64,
    pub omega2: f64,
    pub sigma2: f64,
    pub cycles: f64,
}

pub fn rel_diff(original: &ModelParams, original_cycles: f64, rep: &ReplicateEstimate) -> RelDiff {
    let r = |new: f64, old: f64| (new - old) / old;
    let p = &rep.params;
    RelDiff {
        index: rep.index,
        amp_sin: r(p.amp_sin, original.amp_sin),
        amp_cos: r(p.amp_cos, original.amp_cos),
        phase: arc_distance(p.phase, original.phase) / std::f64::consts::PI,
        mean_rate: r(p.mean_rate, original.mean_rate),
        beta: r(p.beta, original.beta),
        rho: r(p.rho, original.rho),
        omega2: r(p.omega2, original.omega2),
        sigma2: r(p.sigma2, original.sigma2),
        cycles: r(rep.cycles, original_cycles),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub residuals: Vec<f64>,
    /// `(theoretical, empirical)` standard normal quantile pairs of the
    /// residuals scaled by the fitted noise standard deviation.
    pub qq: Vec<(f64, f64)>,
    pub rel_diff: Vec<RelDiff>,
}

/// QQ pairs of `residuals / sd` against the standard normal.
pub fn normal_qq(residuals: &[f64], sd: f64) -> Vec<(f64, f64)> {
    let std_normal = Normal::standard();
    let mut z: Vec<f64> = residuals.iter().map(|r| r / sd).collect();
    z.sort_by(f64::total_cmp);
    ppoints(z.len()).into_iter().map(|p| std_normal.inverse_cdf(p)).zip(z).collect()
}

pub fn diagnostics(signal: &Signal, fitted: &FitResult, run: Option<&BootstrapRun>) -> Diagnostics {
    let residuals = fitted.residuals(signal);
    let qq = normal_qq(&residuals, fitted.theta_hat.sigma2.sqrt());
    let rel_diff = run
        .map(|r| r.estimates.iter().map(|e| rel_diff(&fitted.theta_hat, fitted.cycles, e)).collect())
        .unwrap_or_default();
    Diagnostics { residuals, qq, rel_diff }
}
