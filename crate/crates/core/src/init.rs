//! Heuristic starting values for the estimation loop.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cir::TransitionLaw;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Quadrature, Signal};
use crate::preprocess::loess_smooth;
use crate::rng::Stream;
use crate::smc::{phase_grid, run_filter, ParticleEnsemble, Resampling, SmcConfig};

/// Smallest noise variance handed to the fit; a perfectly smooth input
/// would otherwise produce an invalid zero.
pub const MIN_SIGMA2: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Prior lower bound on the number of cycles.
    pub c_min: f64,
    /// Prior upper bound; `None` uses `max(6, 5 n / 100)`.
    pub c_max: Option<f64>,
    pub span: f64,
    pub n_particles: usize,
    pub beta_range: (f64, f64),
    pub omega2_range: (f64, f64),
    /// Consecutive Feller rejections tolerated per draw.
    pub max_rejections: usize,
    /// Phases tried for the selection filter, evenly spread over the
    /// circle around the initial phase. 1 runs a single pass at that phase.
    pub phase_candidates: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            c_min: 2.0,
            c_max: None,
            span: 0.02,
            n_particles: 1500,
            beta_range: (0.01, 0.5),
            omega2_range: (0.01, 0.3),
            max_rejections: 100_000,
            phase_candidates: 20,
        }
    }
}

/// Default upper cycle bound for a signal with `n` intervals.
pub fn default_c_max(n: usize) -> f64 {
    (5.0 * n as f64 / 100.0).max(6.0)
}

impl InitConfig {
    pub fn cycle_bounds(&self, n: usize) -> (f64, f64) {
        (self.c_min, self.c_max.unwrap_or_else(|| default_c_max(n)))
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let (lo, hi) = self.cycle_bounds(n);
        if !(lo >= 2.0 && lo < hi) {
            return Err(Error::Config(format!("cycle bounds must satisfy 2 <= c_min < c_max, got ({lo}, {hi})")));
        }
        for (name, (a, b)) in [("beta_range", self.beta_range), ("omega2_range", self.omega2_range)] {
            if !(a > 0.0 && a < b && b.is_finite()) {
                return Err(Error::Config(format!("{name} must be a positive interval, got ({a}, {b})")));
            }
        }
        if !(self.span > 0.0 && self.span <= 1.0) {
            return Err(Error::Config(format!("span must lie in (0, 1], got {}", self.span)));
        }
        if self.n_particles < 2 {
            return Err(Error::Config("n_particles must be at least 2".into()));
        }
        if self.max_rejections < 1 {
            return Err(Error::Config("max_rejections must be at least 1".into()));
        }
        if self.phase_candidates < 1 {
            return Err(Error::Config("phase_candidates must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeInit {
    pub amp_sin: f64,
    pub amp_cos: f64,
    pub phase: f64,
    /// Admissible `(A, B)` pairs the draw was made from.
    pub candidates: Vec<(f64, f64)>,
}

/// Both roots of the max/min amplitude equations plus `(max, 0)`,
/// keeping pairs with `A > B`.
pub fn amplitude_candidates(y_max: f64, y_min: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(3);
    let p = y_max - 4.0 * y_min;
    let disc = p * p - 9.0 * y_max * y_max;
    if disc >= 0.0 {
        let root = disc.sqrt();
        for b in [(p + root) / 9.0, (p - root) / 9.0] {
            let a = y_max - b;
            if a > b {
                out.push((a, b));
            }
        }
    }
    if y_max > 0.0 {
        out.push((y_max, 0.0));
    }
    out
}

/// Draws `(A0, B0)` uniformly from the candidate set; the phase starts
/// at `pi`.
pub fn init_amplitudes<R: Rng + ?Sized>(smoothed: &[f64], rng: &mut R) -> Result<AmplitudeInit> {
    if smoothed.is_empty() {
        return Err(Error::InvalidSignal("empty smoothed signal".into()));
    }
    let y_max = smoothed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let y_min = smoothed.iter().copied().fold(f64::INFINITY, f64::min);
    let candidates = amplitude_candidates(y_max, y_min);
    if candidates.is_empty() {
        return Err(Error::InvalidSignal(format!("smoothed maximum {y_max} is not positive")));
    }
    let (amp_sin, amp_cos) = candidates[rng.random_range(0..candidates.len())];
    Ok(AmplitudeInit { amp_sin, amp_cos, phase: PI, candidates })
}

/// Mean squared deviation of the raw signal from its smoothed version.
pub fn init_sigma2(signal: &Signal, smoothed: &[f64]) -> Result<f64> {
    if smoothed.len() != signal.len() {
        return Err(Error::InvalidSignal("smoothed and raw lengths differ".into()));
    }
    let ss: f64 = signal.y().iter().zip(smoothed).map(|(y, s)| (y - s) * (y - s)).sum();
    Ok(ss / signal.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessTriple {
    pub mean_rate: f64,
    pub beta: f64,
    pub omega2: f64,
}

impl ProcessTriple {
    pub fn feller_holds(&self) -> bool {
        2.0 * self.mean_rate * self.beta > self.omega2
    }
}

/// Rejection sampler for `(a, beta, omega2)` over the configured boxes
/// under `2 a beta > omega2`.
pub fn draw_triples<R: Rng + ?Sized>(
    count: usize,
    n: usize,
    delta: f64,
    config: &InitConfig,
    rng: &mut R,
) -> Result<Vec<ProcessTriple>> {
    config.validate(n)?;
    let (c_lo, c_hi) = config.cycle_bounds(n);
    let scale = 2.0 * PI / (n as f64 * delta);
    let (a_lo, a_hi) = (scale * c_lo, scale * c_hi);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut tries = 0;
        loop {
            let t = ProcessTriple {
                mean_rate: rng.random_range(a_lo..a_hi),
                beta: rng.random_range(config.beta_range.0..config.beta_range.1),
                omega2: rng.random_range(config.omega2_range.0..config.omega2_range.1),
            };
            if t.feller_holds() {
                out.push(t);
                break;
            }
            tries += 1;
            if tries >= config.max_rejections {
                return Err(Error::Config(format!(
                    "no parameter triple satisfying 2 a beta > omega2 in {tries} draws; widen the boxes"
                )));
            }
        }
    }
    Ok(out)
}

/// One filter pass where particle `j` evolves under `triples[j]` for its
/// whole lineage. Returns the triple of an index drawn from the final
/// weights.
pub fn select_triple(
    signal: &Signal,
    partial: &ModelParams,
    triples: &[ProcessTriple],
    quadrature: Quadrature,
    stream: Stream,
) -> Result<ProcessTriple> {
    select_triple_over_phases(signal, partial, triples, quadrature, 1, stream)
}

/// Runs the selection filter once per phase on a full-circle grid around
/// `partial.phase` (same triples each time) and draws the final triple
/// from the pass with the largest likelihood estimate.
pub fn select_triple_over_phases(
    signal: &Signal,
    partial: &ModelParams,
    triples: &[ProcessTriple],
    quadrature: Quadrature,
    phase_candidates: usize,
    stream: Stream,
) -> Result<ProcessTriple> {
    let delta = signal.delta();
    let laws = triples
        .iter()
        .map(|t| TransitionLaw::from_rates(t.mean_rate, t.beta, t.omega2, delta))
        .collect::<Result<Vec<_>>>()?;
    let start: Vec<f64> = triples.iter().map(|t| t.mean_rate).collect();
    let config = SmcConfig { n_particles: triples.len(), resampling: Resampling::Multinomial, quadrature };
    let phases = if phase_candidates <= 1 { vec![partial.phase] } else { phase_grid(partial.phase, PI, phase_candidates) };
    let mut best: Option<(f64, ParticleEnsemble)> = None;
    for (j, &phase) in phases.iter().enumerate() {
        let obs = ModelParams { phase, ..*partial };
        // the single pass keeps the unsuffixed stream
        let filter_stream = if phases.len() == 1 { stream.named("filter") } else { stream.named("filter").child(j as u64) };
        let ens = run_filter(signal, &obs, &start, &config, filter_stream, |root, prev, rng| {
            laws[root].sample(prev, rng)
        })?;
        let score = ens.log_evidence();
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, ens));
        }
    }
    let (_, ens) = best.expect("phase list is never empty");
    let j = ens.sample_index(&mut stream.named("select").rng());
    Ok(triples[ens.root_of(j)])
}

pub fn init_process_params(
    signal: &Signal,
    partial: &ModelParams,
    config: &InitConfig,
    quadrature: Quadrature,
    stream: Stream,
) -> Result<ProcessTriple> {
    let n = signal.intervals();
    let triples = draw_triples(config.n_particles, n, signal.delta(), config, &mut stream.named("triples").rng())?;
    select_triple_over_phases(signal, partial, &triples, quadrature, config.phase_candidates, stream)
}

/// Full initialization on a preprocessed signal.
pub fn initialize(signal: &Signal, config: &InitConfig, quadrature: Quadrature, stream: Stream) -> Result<ModelParams> {
    config.validate(signal.intervals())?;
    let smoothed = loess_smooth(signal, config.span)?;
    let amps = init_amplitudes(&smoothed, &mut stream.named("amplitudes").rng())?;
    let sigma2 = init_sigma2(signal, &smoothed)?.max(MIN_SIGMA2);
    let delta = signal.delta();
    // process parameters here are placeholders; only the observation part is used
    let partial = ModelParams::new(amps.amp_sin, amps.amp_cos, amps.phase, 1.0, 1.0, 1.0, sigma2, delta);
    let t = init_process_params(signal, &partial, config, quadrature, stream.named("process"))?;
    let params = ModelParams::new(amps.amp_sin, amps.amp_cos, amps.phase, t.mean_rate, t.beta, t.omega2, sigma2, delta);
    params.validate(delta)?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn figure_amplitudes_give_three_candidates() {
        let c = amplitude_candidates(1.0, -0.5125);
        assert_eq!(c.len(), 3);
        assert_abs_diff_eq!(c[0].0, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(c[0].1, 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(c[1].0, 1.0 - 2.5 / 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[1].1, 2.5 / 9.0, epsilon = 1e-12);
        assert_eq!(c[2], (1.0, 0.0));
    }

    #[test]
    fn pure_sine_extremes() {
        let c = amplitude_candidates(1.0, -1.0);
        assert_eq!(c.len(), 2);
        assert_abs_diff_eq!(c[0].0, 8.0 / 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[0].1, 1.0 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn complex_roots_leave_fallback() {
        // (1 - 4 * 0.1)^2 - 9 < 0
        assert_eq!(amplitude_candidates(1.0, 0.1), vec![(1.0, 0.0)]);
    }

    #[test]
    fn phase_starts_at_pi() {
        let s: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let a = init_amplitudes(&s, &mut Stream::new(4).rng()).unwrap();
        assert_eq!(a.phase, PI);
        assert!(a.candidates.contains(&(a.amp_sin, a.amp_cos)));
    }

    #[test]
    fn sigma2_of_shifted_signal() {
        let smooth: Vec<f64> = (0..40).map(|i| (i as f64 * 0.2).cos()).collect();
        let sig = Signal::from_values(smooth.iter().map(|v| v + 0.3).collect(), 1.0).unwrap();
        assert_abs_diff_eq!(init_sigma2(&sig, &smooth).unwrap(), 0.09, epsilon = 1e-12);
        let same = Signal::from_values(smooth.clone(), 1.0).unwrap();
        assert_eq!(init_sigma2(&same, &smooth).unwrap(), 0.0);
    }

    #[test]
    fn collapsed_cycle_box_pins_mean_rate() {
        let cfg = InitConfig { c_min: 4.0 - 1e-9, c_max: Some(4.0), ..Default::default() };
        let t = draw_triples(200, 500, 1.0, &cfg, &mut Stream::new(2).rng()).unwrap();
        for x in t {
            assert_abs_diff_eq!(x.mean_rate, 2.0 * PI * 4.0 / 500.0, epsilon = 1e-9);
            assert!(x.feller_holds());
        }
    }

    #[test]
    fn infeasible_boxes_fail() {
        let cfg = InitConfig { omega2_range: (10.0, 11.0), max_rejections: 1000, ..Default::default() };
        assert!(matches!(draw_triples(1, 500, 1.0, &cfg, &mut Stream::new(2).rng()), Err(Error::Config(_))));
    }

    #[test]
    fn identical_particles_return_their_triple() {
        let sig = Signal::from_values((0..60).map(|i| (i as f64 * 0.3).sin()).collect(), 1.0).unwrap();
        let partial = ModelParams::new(0.6, 0.4, PI, 1.0, 1.0, 1.0, 0.1, 1.0);
        let t = ProcessTriple { mean_rate: 0.05, beta: 0.3, omega2: 0.02 };
        let got = select_triple(&sig, &partial, &vec![t; 64], Quadrature::Trapezoid, Stream::new(8)).unwrap();
        assert_eq!(got, t);
    }

    #[test]
    fn one_phase_candidate_is_the_single_pass() {
        let sig = Signal::from_values((0..80).map(|i| (i as f64 * 0.3).sin()).collect(), 1.0).unwrap();
        let partial = ModelParams::new(0.6, 0.4, PI, 1.0, 1.0, 1.0, 0.1, 1.0);
        let cfg = InitConfig { n_particles: 64, ..Default::default() };
        let triples = draw_triples(64, 79, 1.0, &cfg, &mut Stream::new(3).rng()).unwrap();
        for seed in 0..5 {
            let a = select_triple(&sig, &partial, &triples, Quadrature::Trapezoid, Stream::new(seed)).unwrap();
            let b = select_triple_over_phases(&sig, &partial, &triples, Quadrature::Trapezoid, 1, Stream::new(seed))
                .unwrap();
            assert_eq!(a, b);
            let swept = select_triple_over_phases(&sig, &partial, &triples, Quadrature::Trapezoid, 6, Stream::new(seed))
                .unwrap();
            assert!(triples.contains(&swept));
        }
    }

    #[test]
    fn config_bounds() {
        assert_eq!(InitConfig::default().cycle_bounds(400), (2.0, 20.0));
        assert_eq!(InitConfig::default().cycle_bounds(100), (2.0, 6.0));
        assert!(InitConfig { c_min: 1.0, ..Default::default() }.validate(100).is_err());
        assert!(InitConfig { c_max: Some(2.0), ..Default::default() }.validate(100).is_err());
    }

    proptest! {
        #[test]
        fn triples_respect_constraints(seed in any::<u64>(), c_min in 2.0f64..5.0, extra in 0.1f64..10.0) {
            let cfg = InitConfig { c_min, c_max: Some(c_min + extra), ..Default::default() };
            let n = 300;
            let ts = draw_triples(50, n, 1.0, &cfg, &mut Stream::new(seed).rng()).unwrap();
            let scale = 2.0 * PI / n as f64;
            for t in ts {
                prop_assert!(2.0 * t.mean_rate * t.beta > t.omega2);
                prop_assert!(t.mean_rate > scale * c_min && t.mean_rate < scale * (c_min + extra));
            }
        }

        #[test]
        fn candidate_set_never_empty_and_ordered(y_max in 0.01f64..5.0, y_min in -5.0f64..0.0) {
            let c = amplitude_candidates(y_max, y_min);
            prop_assert!(!c.is_empty());
            for (a, b) in c {
                prop_assert!(a > b);
                prop_assert!((a + b - y_max).abs() < 1e-12);
            }
        }
    }
}
