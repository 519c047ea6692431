//! Parameter vector, observed signal, latent growth path and the complete
//! log-likelihood of the time-warping model.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::cir::TransitionLaw;
use crate::error::{Error, Result};

/// Relative tolerance on the spacing of an equidistant grid.
pub const GRID_RTOL: f64 = 1e-9;

/// Full parameter vector of the model.
///
/// The signal mean is `amp_sin * sin(g + phase) - amp_cos * cos(2g + 2 phase)`
/// and the growth rate follows a square-root diffusion with long-run mean
/// `mean_rate`, reversion rate `beta` and infinitesimal variance `omega2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    #[serde(rename = "A")]
    pub amp_sin: f64,
    #[serde(rename = "B")]
    pub amp_cos: f64,
    /// Phase at the first sample, kept in `[0, 2pi)`.
    #[serde(rename = "b")]
    pub phase: f64,
    #[serde(rename = "a")]
    pub mean_rate: f64,
    pub beta: f64,
    /// One-lag autocorrelation `exp(-delta * beta)`.
    pub rho: f64,
    pub omega2: f64,
    pub sigma2: f64,
}

impl ModelParams {
    /// Builds a parameter vector for a grid of spacing `delta`; `rho` is
    /// derived from `beta` and the phase is wrapped.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        amp_sin: f64,
        amp_cos: f64,
        phase: f64,
        mean_rate: f64,
        beta: f64,
        omega2: f64,
        sigma2: f64,
        delta: f64,
    ) -> Self {
        Self {
            amp_sin,
            amp_cos,
            phase: wrap_phase(phase),
            mean_rate,
            beta,
            rho: (-delta * beta).exp(),
            omega2,
            sigma2,
        }
    }

    /// Stationary variance of the growth rate, `a omega^2 / (2 beta)`.
    pub fn gamma2(&self) -> f64 {
        self.mean_rate * self.omega2 / (2.0 * self.beta)
    }

    pub fn with_phase(mut self, phase: f64) -> Self {
        self.phase = wrap_phase(phase);
        self
    }

    /// Sets `beta` and keeps `rho` consistent with it.
    pub fn with_beta(mut self, beta: f64, delta: f64) -> Self {
        self.beta = beta;
        self.rho = (-delta * beta).exp();
        self
    }

    /// `2 a beta >= omega^2`: the growth rate stays strictly positive.
    pub fn feller_holds(&self) -> bool {
        2.0 * self.mean_rate * self.beta >= self.omega2
    }

    /// Checks the support constraints except the Feller condition, which
    /// simulation deliberately tolerates (see [`ModelParams::validate_stationary`]).
    ///
    /// `A = B` is admitted: it is the lower end of the amplitude update's
    /// clamp `A in [0.5, 1]`, `B = 1 - A`.
    pub fn validate(&self, delta: f64) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        let all = [
            self.amp_sin,
            self.amp_cos,
            self.phase,
            self.mean_rate,
            self.beta,
            self.rho,
            self.omega2,
            self.sigma2,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad(format!("non-finite entry in {self:?}"));
        }
        if !(self.amp_sin > 0.0) || self.amp_cos < 0.0 || self.amp_sin < self.amp_cos {
            return bad(format!(
                "amplitudes need A >= B >= 0 (A = {}, B = {})",
                self.amp_sin, self.amp_cos
            ));
        }
        if !(0.0..TAU).contains(&self.phase) {
            return bad(format!("phase {} outside [0, 2pi)", self.phase));
        }
        if self.mean_rate <= 0.0 || self.beta <= 0.0 || self.sigma2 <= 0.0 || self.omega2 <= 0.0 {
            return bad("a, beta, omega2 and sigma2 must be positive".into());
        }
        let rho = (-delta * self.beta).exp();
        if (self.rho - rho).abs() > 1e-12 * rho.max(1e-300) {
            return bad(format!("rho {} inconsistent with exp(-delta beta) = {rho}", self.rho));
        }
        Ok(())
    }

    /// [`ModelParams::validate`] plus the Feller condition.
    pub fn validate_stationary(&self, delta: f64) -> Result<()> {
        self.validate(delta)?;
        if !self.feller_holds() {
            return Err(Error::InvalidParams(format!(
                "Feller condition violated: 2 a beta = {} < omega2 = {}",
                2.0 * self.mean_rate * self.beta,
                self.omega2
            )));
        }
        Ok(())
    }
}

/// Wraps an angle into `[0, 2pi)`.
pub fn wrap_phase(phase: f64) -> f64 {
    let w = phase.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Shortest distance between two angles on the unit circle, in `[0, pi]`.
pub fn arc_distance(x: f64, y: f64) -> f64 {
    let d = (x - y).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Mean of the signal at cumulative phase `g`.
#[inline]
pub fn signal_mean(g: f64, params: &ModelParams) -> f64 {
    let s = (g + params.phase).sin();
    // cos(2t) = 1 - 2 sin(t)^2
    params.amp_sin * s - params.amp_cos * (1.0 - 2.0 * s * s)
}

/// Preprocessing applied to a signal before fitting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    /// Subtracted mean, if the signal was centered.
    pub ybar: Option<f64>,
    /// Smoothed envelope the centered signal was divided by.
    pub envelope: Option<Vec<f64>>,
    pub normalized: bool,
}

/// Equidistant samples `(x_i, y_i)`, `i = 0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    x: Vec<f64>,
    y: Vec<f64>,
    delta: f64,
    pub preproc: Preprocessing,
}

impl Signal {
    /// Validates that `x` is strictly increasing with constant spacing.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::InvalidSignal(format!(
                "x has {} samples but y has {}",
                x.len(),
                y.len()
            )));
        }
        if x.len() < 2 {
            return Err(Error::InvalidSignal("at least two samples are required".into()));
        }
        if let Some(i) = x.iter().chain(y.iter()).position(|v| !v.is_finite()) {
            return Err(Error::InvalidSignal(format!("non-finite value at position {}", i % x.len())));
        }
        let n = x.len() - 1;
        let delta = (x[n] - x[0]) / n as f64;
        if !(delta > 0.0) {
            return Err(Error::InvalidSignal("x must be strictly increasing".into()));
        }
        for i in 1..=n {
            let step = x[i] - x[i - 1];
            if (step - delta).abs() > GRID_RTOL * delta {
                return Err(Error::NonEquidistant { index: i, step, expected: delta });
            }
        }
        Ok(Self { x, y, delta, preproc: Preprocessing::default() })
    }

    /// Samples on `x_i = i * delta`.
    pub fn from_values(y: Vec<f64>, delta: f64) -> Result<Self> {
        let x = (0..y.len()).map(|i| i as f64 * delta).collect();
        Self::new(x, y)
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Number of samples, `n + 1`.
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Number of intervals `n`.
    pub fn intervals(&self) -> usize {
        self.y.len() - 1
    }

    /// Same grid and metadata, new values.
    pub fn with_values(&self, y: Vec<f64>) -> Self {
        assert_eq!(y.len(), self.y.len(), "replacement values must match the grid");
        Self { x: self.x.clone(), y, delta: self.delta, preproc: self.preproc.clone() }
    }
}

/// Rule used to integrate the growth rate into the cumulative phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    /// `g_i = g_{i-1} + delta (xi_{i-1} + xi_i) / 2`
    #[default]
    Trapezoid,
    /// Left rectangle, `g_i = g_{i-1} + delta xi_{i-1}`.
    Rectangle,
}

impl Quadrature {
    #[inline]
    pub fn step(self, g_prev: f64, xi_prev: f64, xi: f64, delta: f64) -> f64 {
        match self {
            Quadrature::Trapezoid => g_prev + 0.5 * delta * (xi_prev + xi),
            Quadrature::Rectangle => g_prev + delta * xi_prev,
        }
    }
}

/// Latent growth-rate trajectory and its running integral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthPath {
    pub xi: Vec<f64>,
    pub g: Vec<f64>,
}

impl GrowthPath {
    /// Integrates `xi` on a grid of spacing `delta` starting from `g = 0`.
    pub fn from_rates(xi: Vec<f64>, delta: f64, rule: Quadrature) -> Self {
        let mut g = Vec::with_capacity(xi.len());
        if !xi.is_empty() {
            g.push(0.0);
            for i in 1..xi.len() {
                let next = rule.step(g[i - 1], xi[i - 1], xi[i], delta);
                g.push(next);
            }
        }
        Self { xi, g }
    }

    pub fn from_parts(xi: Vec<f64>, g: Vec<f64>) -> Result<Self> {
        if xi.len() != g.len() {
            return Err(Error::DegeneratePath(format!(
                "xi has {} entries but g has {}",
                xi.len(),
                g.len()
            )));
        }
        Ok(Self { xi, g })
    }

    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    /// Positive rates after the first point and strictly increasing phase.
    pub fn check(&self) -> Result<()> {
        if let Some(i) = self.xi.iter().skip(1).position(|&v| !(v > 0.0)) {
            return Err(Error::DegeneratePath(format!("non-positive rate at index {}", i + 1)));
        }
        if let Some(i) = self.g.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::DegeneratePath(format!("phase not increasing at index {}", i + 1)));
        }
        Ok(())
    }

    pub fn terminal_phase(&self) -> f64 {
        self.g.last().copied().unwrap_or(0.0)
    }
}

/// Number of cycles traversed by the path, `g(x_n) / 2pi`.
pub fn cycle_count(path: &GrowthPath) -> f64 {
    path.terminal_phase() / TAU
}

/// Gaussian observation part of the complete log-likelihood.
pub fn observation_log_likelihood(signal: &Signal, path: &GrowthPath, params: &ModelParams) -> f64 {
    let rss: f64 = signal
        .y()
        .iter()
        .zip(&path.g)
        .map(|(&y, &g)| {
            let r = y - signal_mean(g, params);
            r * r
        })
        .sum();
    -rss / (2.0 * params.sigma2) - 0.5 * signal.len() as f64 * params.sigma2.ln()
}

/// Complete-data log-likelihood of the signal and a latent path.
///
/// The density of the starting rate is a constant and is left out.
pub fn complete_log_likelihood(signal: &Signal, path: &GrowthPath, params: &ModelParams) -> Result<f64> {
    if path.len() != signal.len() {
        return Err(Error::DegeneratePath(format!(
            "path has {} points but the signal has {}",
            path.len(),
            signal.len()
        )));
    }
    let law = TransitionLaw::from_params(params, signal.delta())?;
    let mut total = observation_log_likelihood(signal, path, params);
    for (i, w) in path.xi.windows(2).enumerate() {
        let lp = law.log_density(w[1], w[0]);
        if !lp.is_finite() {
            return Err(Error::DegeneratePath(format!(
                "transition {} -> {} at index {} has zero density",
                w[0],
                w[1],
                i + 1
            )));
        }
        total += lp;
    }
    Ok(total)
}

/// Relative change used by the stopping rule. Phases are compared by arc
/// length on the unit circle divided by pi.
pub fn max_relative_change(prev: &ModelParams, next: &ModelParams) -> f64 {
    let rel = |old: f64, new: f64| {
        if old == new {
            0.0
        } else {
            ((new - old) / old).abs()
        }
    };
    [
        rel(prev.amp_sin, next.amp_sin),
        rel(prev.amp_cos, next.amp_cos),
        arc_distance(prev.phase, next.phase) / PI,
        rel(prev.mean_rate, next.mean_rate),
        rel(prev.beta, next.beta),
        rel(prev.rho, next.rho),
        rel(prev.omega2, next.omega2),
        rel(prev.sigma2, next.sigma2),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}
