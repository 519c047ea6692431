//! Synthetic signals for the simulation study: parameter draws from
//! uniform boxes with Feller rejection and Euler-Maruyama latent paths.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cir::simulate_path;
use crate::error::{Error, Result};
use crate::init::default_c_max;
use crate::model::{cycle_count, signal_mean, GrowthPath, ModelParams, Signal};
use crate::rng::Stream;

/// Uniform supports of the study design. `omega` and `sigma` are standard
/// deviations, not variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyBoxes {
    pub beta: (f64, f64),
    pub omega: (f64, f64),
    pub sigma: (f64, f64),
    pub amp_sin: (f64, f64),
    pub c_min: f64,
    /// `None` uses `max(6, 5 n / 100)`.
    pub c_max: Option<f64>,
    pub max_rejections: usize,
}

impl Default for StudyBoxes {
    fn default() -> Self {
        Self {
            beta: (0.01, 3.0),
            omega: (0.01, 0.3),
            sigma: (0.2, 0.6),
            amp_sin: (0.5, 1.0),
            c_min: 2.0,
            c_max: None,
            max_rejections: 100_000,
        }
    }
}

impl StudyBoxes {
    pub fn mean_rate_range(&self, n: usize, delta: f64) -> (f64, f64) {
        let c_max = self.c_max.unwrap_or_else(|| default_c_max(n));
        let scale = TAU / (n as f64 * delta);
        (scale * self.c_min, scale * c_max)
    }
}

/// Draws a parameter vector; `(a, beta, omega)` is redrawn until
/// `2 a beta > omega^2`.
pub fn sample_study_params<R: Rng + ?Sized>(
    n: usize,
    delta: f64,
    boxes: &StudyBoxes,
    rng: &mut R,
) -> Result<ModelParams> {
    if n == 0 || !(delta > 0.0) {
        return Err(Error::Config("need n >= 1 and delta > 0".into()));
    }
    let (a_lo, a_hi) = boxes.mean_rate_range(n, delta);
    if !(a_lo < a_hi) {
        return Err(Error::Config(format!("empty mean-rate range ({a_lo}, {a_hi})")));
    }
    let mut tries = 0;
    let (a, beta, omega) = loop {
        let beta = rng.random_range(boxes.beta.0..boxes.beta.1);
        let a = rng.random_range(a_lo..a_hi);
        let omega: f64 = rng.random_range(boxes.omega.0..boxes.omega.1);
        if 2.0 * a * beta > omega * omega {
            break (a, beta, omega);
        }
        tries += 1;
        if tries >= boxes.max_rejections {
            return Err(Error::Config("parameter boxes admit no Feller-satisfying triple".into()));
        }
    };
    let sigma: f64 = rng.random_range(boxes.sigma.0..boxes.sigma.1);
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(boxes.amp_sin.0..boxes.amp_sin.1);
    Ok(ModelParams::new(amp, 1.0 - amp, phase, a, beta, omega * omega, sigma * sigma, delta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSignal {
    pub params: ModelParams,
    pub signal: Signal,
    pub path: GrowthPath,
}

impl SimulatedSignal {
    pub fn true_cycles(&self) -> f64 {
        cycle_count(&self.path)
    }
}

/// Simulates `n + 1` observations: latent path from `xi_0 = 0`, then
/// `y = f(g) + N(0, sigma2)`.
pub fn simulate_signal(
    params: &ModelParams,
    n: usize,
    delta: f64,
    substeps: usize,
    stream: Stream,
) -> Result<SimulatedSignal> {
    if !(params.sigma2 >= 0.0) {
        return Err(Error::InvalidParams("sigma2 must be nonnegative".into()));
    }
    let path = simulate_path(params, n, delta, substeps, 0.0, stream.named("path"))?;
    let mut rng = stream.named("noise").rng();
    let sd = params.sigma2.sqrt();
    let y = path
        .g
        .iter()
        .map(|&g| {
            let e: f64 = rng.sample(StandardNormal);
            signal_mean(g, params) + sd * e
        })
        .collect();
    let signal = Signal::from_values(y, delta)?;
    Ok(SimulatedSignal { params: *params, signal, path })
}

/// Fractions of absolute cycle errors `<= 1` and `<= 3`.
pub fn recovery_rates(errors: &[f64]) -> (f64, f64) {
    if errors.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = errors.len() as f64;
    let within = |t: f64| errors.iter().filter(|e| e.abs() <= t).count() as f64 / n;
    (within(1.0), within(3.0))
}
