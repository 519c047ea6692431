//! Stochastic approximation EM with martingale estimating functions.
//!
//! Each iteration draws a phase and a latent path with the phase grid
//! search, computes the estimating-function statistics on that path,
//! smooths them with a decaying gain and maps them to new parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cycle_count, max_relative_change, signal_mean, GrowthPath, ModelParams, Quadrature, Signal};
use crate::rng::Stream;
use crate::smc::{smc_plus, Resampling, SmcConfig};

/// Exponent of the gain sequence after the memory start.
pub const GAIN_EXPONENT: f64 = 0.8;

/// Gain `alpha_m`: one up to `m0`, then `(m - m0)^-0.8`.
pub fn step_size(m: usize, m0: usize) -> f64 {
    if m <= m0 {
        1.0
    } else {
        ((m - m0) as f64).powf(-GAIN_EXPONENT)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaemConfig {
    /// Last iteration without memory (gain one).
    pub m0: usize,
    pub max_iter: usize,
    /// Threshold on the largest relative parameter change.
    pub stop_threshold: f64,
    /// Consecutive iterations below the threshold required to stop.
    pub patience: usize,
    pub n_particles: usize,
    pub grid_size: usize,
    /// `a` is only updated inside `(a0 / a_clamp, a_clamp * a0)`.
    pub a_clamp: f64,
    pub resampling: Resampling,
    pub quadrature: Quadrature,
    /// Consecutive iterations with every phase candidate failing before
    /// the fit is abandoned.
    pub max_failed_iterations: usize,
}

impl Default for SaemConfig {
    fn default() -> Self {
        Self {
            m0: 50,
            max_iter: 400,
            stop_threshold: 1e-4,
            patience: 1,
            n_particles: 1500,
            grid_size: 20,
            a_clamp: 2.0,
            resampling: Resampling::Multinomial,
            quadrature: Quadrature::Trapezoid,
            max_failed_iterations: 3,
        }
    }
}

impl SaemConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.m0 < 1 {
            return bad("m0 must be at least 1");
        }
        if self.max_iter < 1 {
            return bad("max_iter must be at least 1");
        }
        if !(self.stop_threshold > 0.0) {
            return bad("stop_threshold must be positive");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if self.n_particles < 2 {
            return bad("n_particles must be at least 2");
        }
        if self.grid_size < 2 {
            return bad("grid_size must be at least 2");
        }
        if !(self.a_clamp > 1.0) {
            return bad("a_clamp must exceed 1");
        }
        if self.max_failed_iterations < 1 {
            return bad("max_failed_iterations must be at least 1");
        }
        Ok(())
    }

    pub fn smc(&self) -> SmcConfig {
        SmcConfig { n_particles: self.n_particles, resampling: self.resampling, quadrature: self.quadrature }
    }
}

/// Estimating-function statistics: `s1` estimates `rho`, `s2` the mean rate
/// `a`, `s3` the infinitesimal variance and `s4` the noise variance.
/// Entries that could not be computed on a path are `NaN`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Statistics {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub s4: f64,
}

impl Statistics {
    /// Statistics that map back onto `params` unchanged.
    pub fn from_params(params: &ModelParams) -> Self {
        Self { s1: params.rho, s2: params.mean_rate, s3: params.omega2, s4: params.sigma2 }
    }

    fn as_array(&self) -> [f64; 4] {
        [self.s1, self.s2, self.s3, self.s4]
    }

    fn from_array(v: [f64; 4]) -> Self {
        Self { s1: v[0], s2: v[1], s3: v[2], s4: v[3] }
    }
}

/// Computes the four statistics on a path.
///
/// Transition pairs starting at a zero rate are dropped. The noise
/// statistic uses the regression function of `theta` (whose phase should
/// be the one the path was drawn with).
pub fn statistics(path: &GrowthPath, signal: &Signal, theta: &ModelParams) -> Result<Statistics> {
    if path.len() != signal.len() {
        return Err(Error::DegeneratePath("path and signal lengths differ".into()));
    }
    let delta = signal.delta();
    let xi = &path.xi;
    let pairs: Vec<(f64, f64)> = xi.windows(2).filter(|w| w[0] > 0.0).map(|w| (w[0], w[1])).collect();
    if pairs.len() < 2 {
        return Err(Error::DegeneratePath("fewer than two transitions with a positive start".into()));
    }
    if pairs.iter().any(|&(_, next)| !(next > 0.0) || !next.is_finite()) {
        return Err(Error::DegeneratePath("path contains a non-positive rate".into()));
    }
    let n = pairs.len() as f64;
    let (mut ratio, mut next_sum, mut prev_sum, mut inv_prev_sum, mut drift) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(prev, next) in &pairs {
        ratio += next / prev;
        next_sum += next;
        prev_sum += prev;
        inv_prev_sum += 1.0 / prev;
        drift += next - prev;
    }
    let (ratio, next_mean, prev_mean, inv_prev_mean) = (ratio / n, next_sum / n, prev_sum / n, inv_prev_sum / n);

    let denom = 1.0 - prev_mean * inv_prev_mean;
    // by Jensen prev_mean * inv_prev_mean >= 1 with equality only on a constant path
    if !(denom.abs() > 1e-12) {
        return Err(Error::DegeneratePath("constant rate path; rho is not identifiable".into()));
    }
    let s1 = (ratio - next_mean * inv_prev_mean) / denom;
    let s2 = if s1 != 1.0 { next_mean + s1 / (n * (1.0 - s1)) * drift } else { f64::NAN };

    // the weighted residual ratio estimates omega^2 / beta; multiply by beta
    let beta = if s1 > 0.0 && s1 < 1.0 { -s1.ln() / delta } else { theta.beta };
    let (mut num, mut den) = (0.0, 0.0);
    for &(prev, next) in &pairs {
        let r = next - prev * s1 - s2 * (1.0 - s1);
        num += r * r / prev;
        den += ((0.5 * s2 - prev) * s1 * s1 - (s2 - prev) * s1 + 0.5 * s2) / prev;
    }
    let s3 = if den > 0.0 && s2.is_finite() { beta * num / den } else { f64::NAN };

    let n_obs = signal.intervals().max(1) as f64;
    let s4 = signal
        .y()
        .iter()
        .zip(&path.g)
        .map(|(&y, &g)| {
            let r = y - signal_mean(g, theta);
            r * r
        })
        .sum::<f64>()
        / n_obs;
    Ok(Statistics { s1, s2, s3, s4 })
}

/// `s <- s + alpha_m (S - s)` componentwise. Non-finite new statistics
/// leave the running value untouched.
pub fn sa_update(prev: &Statistics, new: &Statistics, m: usize, m0: usize) -> Statistics {
    let alpha = step_size(m, m0);
    let p = prev.as_array();
    let s = new.as_array();
    let mut out = p;
    for k in 0..4 {
        if s[k].is_finite() {
            out[k] = if alpha == 1.0 || !p[k].is_finite() { s[k] } else { p[k] + alpha * (s[k] - p[k]) };
        }
    }
    Statistics::from_array(out)
}

/// Constrained least squares for the sine amplitude with `B = 1 - A`:
/// `A = clamp(sum w (y - v) / sum w^2, 0.5, 1)` where
/// `w = sin(g+b) + cos(2g+2b)` and `v = -cos(2g+2b)`.
/// Returns `None` when the design is degenerate.
pub fn update_amplitude(signal: &Signal, path: &GrowthPath, phase: f64) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (&y, &g) in signal.y().iter().zip(&path.g).skip(1) {
        let t = g + phase;
        let c2 = (2.0 * t).cos();
        let w = t.sin() + c2;
        let v = -c2;
        num += w * (y - v);
        den += w * w;
    }
    if !(den > 0.0) {
        return None;
    }
    Some((num / den).clamp(0.5, 1.0))
}

/// Maps smoothed statistics to parameters. `theta` carries the phase
/// selected in this iteration; its other entries are the previous
/// estimates, kept wherever a statistic is unusable.
pub fn update_theta(
    s: &Statistics,
    theta: &ModelParams,
    a0: f64,
    a_clamp: f64,
    path: &GrowthPath,
    signal: &Signal,
) -> (ModelParams, Vec<String>) {
    let delta = signal.delta();
    let mut next = *theta;
    let mut warnings = Vec::new();
    if s.s1 > 0.0 && s.s1 < 1.0 {
        next.rho = s.s1;
        next.beta = -s.s1.ln() / delta;
    } else {
        warnings.push(format!("s1 = {} outside (0,1); rho and beta kept", s.s1));
    }
    if s.s2 > a0 / a_clamp && s.s2 < a_clamp * a0 {
        next.mean_rate = s.s2;
    }
    if s.s3 > 0.0 && s.s3.is_finite() {
        next.omega2 = s.s3;
    } else {
        warnings.push(format!("s3 = {} unusable; omega2 kept", s.s3));
    }
    if s.s4 > 0.0 && s.s4.is_finite() {
        next.sigma2 = s.s4;
    } else {
        warnings.push(format!("s4 = {} unusable; sigma2 kept", s.s4));
    }
    // keep the iterate inside the Feller region; outside it the filter's
    // paths get absorbed at zero
    let cap = 2.0 * next.mean_rate * next.beta;
    if next.omega2 > cap {
        warnings.push(format!("omega2 = {} above 2 a beta = {cap}; projected", next.omega2));
        next.omega2 = cap;
    }
    match update_amplitude(signal, path, theta.phase) {
        Some(a) => {
            next.amp_sin = a;
            next.amp_cos = 1.0 - a;
        }
        None => warnings.push("degenerate amplitude regression; A kept".into()),
    }
    (next, warnings)
}

/// One row of the iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub params: ModelParams,
    /// Statistics of this iteration's path, if they could be computed.
    pub raw: Option<Statistics>,
    pub smoothed: Statistics,
    pub alpha: f64,
    pub half_width: f64,
    /// Complete log-likelihood of the selected path.
    pub loglik: f64,
    /// Cycle count of the selected path.
    pub cycles: f64,
    pub min_ess: f64,
    pub max_rel_change: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Threshold,
    MaxIter,
}

/// Outcome of [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: ModelParams,
    pub init: ModelParams,
    pub path: GrowthPath,
    /// `signal_mean(path.g[i], theta_hat)`.
    pub fitted: Vec<f64>,
    pub trace: Vec<TraceRow>,
    pub cycles: f64,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub iterations: usize,
    /// `A / B` of the final estimate (infinite when `B = 0`).
    pub amplitude_ratio: f64,
}

impl FitResult {
    pub fn residuals(&self, signal: &Signal) -> Vec<f64> {
        signal.y().iter().zip(&self.fitted).map(|(y, f)| y - f).collect()
    }
}

/// Runs the estimation loop from `init` on an already normalized signal.
pub fn fit(signal: &Signal, config: &SaemConfig, init: &ModelParams, stream: Stream) -> Result<FitResult> {
    config.validate()?;
    init.validate(signal.delta())?;
    let smc = config.smc();
    let a0 = init.mean_rate;
    let mut theta = *init;
    let mut stats = Statistics::from_params(init);
    let mut path: Option<GrowthPath> = None;
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut failures = 0usize;
    let mut below = 0usize;
    let mut stop_reason = StopReason::MaxIter;

    for m in 1..=config.max_iter {
        let grid = match smc_plus(signal, &theta, m, config.m0, config.grid_size, &smc, stream.child(m as u64)) {
            Ok(g) => {
                failures = 0;
                g
            }
            Err(e) => {
                failures += 1;
                trace.push(TraceRow {
                    iteration: m,
                    params: theta,
                    raw: None,
                    smoothed: stats,
                    alpha: step_size(m, config.m0),
                    half_width: crate::smc::grid_half_width(m, config.m0),
                    loglik: f64::NEG_INFINITY,
                    cycles: f64::NAN,
                    min_ess: f64::NAN,
                    max_rel_change: f64::NAN,
                    warnings: vec![e.to_string()],
                });
                below = 0;
                if failures >= config.max_failed_iterations {
                    return Err(Error::FitFailure {
                        iterations: m,
                        reason: format!("{failures} consecutive iterations without a usable phase candidate: {e}"),
                    });
                }
                continue;
            }
        };

        let current = theta.with_phase(grid.b_star);
        let mut warnings = Vec::new();
        let raw = match statistics(&grid.path, signal, &current) {
            Ok(s) => {
                stats = sa_update(&stats, &s, m, config.m0);
                Some(s)
            }
            Err(e) => {
                warnings.push(format!("statistics skipped: {e}"));
                None
            }
        };
        let (next, w) = update_theta(&stats, &current, a0, config.a_clamp, &grid.path, signal);
        warnings.extend(w);
        let change = max_relative_change(&theta, &next);
        theta = next;
        trace.push(TraceRow {
            iteration: m,
            params: theta,
            raw,
            smoothed: stats,
            alpha: step_size(m, config.m0),
            half_width: grid.half_width,
            loglik: grid.loglik_per_candidate[grid.best],
            cycles: cycle_count(&grid.path),
            min_ess: grid.min_ess,
            max_rel_change: change,
            warnings,
        });
        path = Some(grid.path);

        if change < config.stop_threshold {
            below += 1;
        } else {
            below = 0;
        }
        if below >= config.patience {
            stop_reason = StopReason::Threshold;
            break;
        }
    }

    let Some(path) = path else {
        return Err(Error::FitFailure {
            iterations: trace.len(),
            reason: "no iteration produced a latent path".into(),
        });
    };
    let fitted = path.g.iter().map(|&g| signal_mean(g, &theta)).collect();
    let cycles = cycle_count(&path);
    Ok(FitResult {
        theta_hat: theta,
        init: *init,
        fitted,
        cycles,
        converged: stop_reason == StopReason::Threshold,
        stop_reason,
        iterations: trace.len(),
        amplitude_ratio: theta.amp_sin / theta.amp_cos,
        path,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cir::{sample_exact_rates, TransitionLaw};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn gain_schedule() {
        let m0 = 50;
        assert_eq!(step_size(1, m0), 1.0);
        assert_eq!(step_size(m0, m0), 1.0);
        assert_eq!(step_size(m0 + 1, m0), 1.0);
        assert_abs_diff_eq!(step_size(m0 + 32, m0), 0.0625, epsilon = 1e-15);
        assert_abs_diff_eq!(step_size(m0 + 1024, m0), 1.0 / 256.0, epsilon = 1e-15);
    }

    #[test]
    fn sa_update_blends_after_memory_start() {
        let prev = Statistics { s1: 0.5, s2: 1.0, s3: 2.0, s4: 3.0 };
        let new = Statistics { s1: 0.9, s2: 2.0, s3: 4.0, s4: f64::NAN };
        assert_eq!(sa_update(&prev, &new, 10, 50).s2, 2.0);
        let s = sa_update(&prev, &new, 50 + 32, 50);
        assert_abs_diff_eq!(s.s1, 0.5 + 0.0625 * 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(s.s3, 2.0 + 0.0625 * 2.0, epsilon = 1e-15);
        assert_eq!(s.s4, 3.0);
    }

    fn signal_on(path: &GrowthPath, p: &ModelParams) -> Signal {
        Signal::from_values(path.g.iter().map(|&g| signal_mean(g, p)).collect(), 1.0).unwrap()
    }

    fn wavy_path(n: usize) -> GrowthPath {
        let xi = (0..=n).map(|i| 0.05 + 0.02 * (i as f64 * 0.037).sin()).collect();
        GrowthPath::from_rates(xi, 1.0, Quadrature::Trapezoid)
    }

    #[test]
    fn constant_path_is_degenerate() {
        let path = GrowthPath::from_rates(vec![0.05; 50], 1.0, Quadrature::Trapezoid);
        let p = ModelParams::new(0.6, 0.4, 0.0, 0.05, 0.1, 0.01, 0.1, 1.0);
        let s = signal_on(&path, &p);
        assert!(matches!(statistics(&path, &s, &p), Err(Error::DegeneratePath(_))));
    }

    #[test]
    fn perfect_fit_has_zero_noise_statistic() {
        let path = wavy_path(120);
        let p = ModelParams::new(0.6, 0.4, 1.0, 0.05, 0.1, 0.01, 0.1, 1.0);
        let st = statistics(&path, &signal_on(&path, &p), &p).unwrap();
        assert_eq!(st.s4, 0.0);
    }

    #[test]
    fn leading_zero_rate_is_dropped() {
        let mut path = wavy_path(80);
        let p = ModelParams::new(0.6, 0.4, 1.0, 0.05, 0.1, 0.01, 0.1, 1.0);
        let s = signal_on(&path, &p);
        let with = statistics(&path, &s, &p).unwrap();
        path.xi[0] = 0.0;
        let without = statistics(&path, &s, &p).unwrap();
        assert!(without.s1.is_finite() && without.s3.is_finite());
        assert_ne!(with.s1, without.s1);
    }

    #[test]
    fn statistics_recover_parameters_of_observed_path() {
        let law = TransitionLaw::from_rates(0.05, 0.2, 0.01, 1.0).unwrap();
        let xi = sample_exact_rates(&law, 100_000, 0.05, Stream::new(21));
        let path = GrowthPath::from_rates(xi, 1.0, Quadrature::Trapezoid);
        let p = ModelParams::new(0.6, 0.4, 0.0, 0.05, 0.2, 0.01, 0.1, 1.0);
        let st = statistics(&path, &signal_on(&path, &p), &p).unwrap();
        assert!((st.s1 / (-0.2f64).exp() - 1.0).abs() < 0.10, "s1 {}", st.s1);
        assert!((st.s2 / 0.05 - 1.0).abs() < 0.05, "s2 {}", st.s2);
        assert!((st.s3 / 0.01 - 1.0).abs() < 0.15, "s3 {}", st.s3);
    }

    #[test]
    fn amplitude_regression_exact_and_clamped() {
        let path = wavy_path(300);
        let b = 0.8;
        for (a_true, expect) in [(0.7, 0.7), (0.3, 0.5), (0.55, 0.55)] {
            let p = ModelParams::new(a_true, 1.0 - a_true, b, 0.05, 0.1, 0.01, 0.1, 1.0);
            let got = update_amplitude(&signal_on(&path, &p), &path, b).unwrap();
            assert_abs_diff_eq!(got, expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn theta_update_rules() {
        let path = wavy_path(100);
        let p = ModelParams::new(0.6, 0.4, 0.5, 0.05, 0.2, 0.01, 0.1, 1.0);
        let signal = signal_on(&path, &p);
        let s = Statistics { s1: (-0.07f64).exp(), s2: 0.05, s3: 0.005, s4: 0.03 };
        let (next, w) = update_theta(&s, &p, 0.05, 2.0, &path, &signal);
        assert!(w.is_empty());
        assert_abs_diff_eq!(next.beta, 0.07, epsilon = 1e-14);
        assert_eq!(next.mean_rate, 0.05);
        assert_eq!(next.omega2, 0.005);
        assert_eq!(next.sigma2, 0.03);
        assert_eq!(next.amp_cos, 1.0 - next.amp_sin);

        let outside = Statistics { s2: 3.0 * 0.05, s1: 1.2, ..s };
        let prev = ModelParams { mean_rate: 0.061, ..p };
        let (next, w) = update_theta(&outside, &prev, 0.05, 2.0, &path, &signal);
        assert_eq!(next.mean_rate, 0.061);
        assert_eq!(next.beta, prev.beta);
        assert_eq!(w.len(), 1);

        // 2 a beta = 0.007
        let wild = Statistics { s3: 0.02, ..s };
        let (next, w) = update_theta(&wild, &p, 0.05, 2.0, &path, &signal);
        assert_abs_diff_eq!(next.omega2, 2.0 * next.mean_rate * next.beta, epsilon = 1e-15);
        assert!(next.feller_holds());
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn infinite_threshold_stops_after_one_iteration() {
        let path = wavy_path(60);
        let truth = ModelParams::new(0.6, 0.4, PI / 3.0, 0.05, 0.2, 0.001, 0.01, 1.0);
        let signal = signal_on(&path, &truth);
        let cfg = SaemConfig { stop_threshold: f64::INFINITY, n_particles: 50, grid_size: 4, ..Default::default() };
        let res = fit(&signal, &cfg, &truth, Stream::new(1)).unwrap();
        assert_eq!(res.iterations, 1);
        assert!(res.converged);
        assert_eq!(res.trace.len(), 1);
        for (f, g) in res.fitted.iter().zip(&res.path.g) {
            assert_eq!(*f, signal_mean(*g, &res.theta_hat));
        }
    }

    #[test]
    fn config_validation() {
        assert!(SaemConfig::default().validate().is_ok());
        assert!(SaemConfig { m0: 0, ..Default::default() }.validate().is_err());
        assert!(SaemConfig { grid_size: 1, ..Default::default() }.validate().is_err());
    }
}
