#![allow(dead_code)]

use std::f64::consts::PI;

use cyclewarp_core::simulate::{simulate_signal, SimulatedSignal};
use cyclewarp_core::{ModelParams, Stream};

/// The worked example configuration (n = 500). Its `omega2` violates the
/// Feller condition.
pub fn fig2() -> ModelParams {
    ModelParams::new(0.6, 0.4, PI / 20.0, 0.05, 0.07, 0.064, 0.09, 1.0)
}

/// Same configuration with `omega2 = 0.0064`, which satisfies
/// `2 a beta > omega2`.
pub fn fig2_feller() -> ModelParams {
    ModelParams { omega2: 0.0064, ..fig2() }
}

pub fn simulate(params: &ModelParams, n: usize, seed: u64) -> SimulatedSignal {
    simulate_signal(params, n, 1.0, 100, Stream::new(seed).named("sim")).unwrap()
}

/// Regularized lower incomplete gamma through statrs.
pub fn gamma_lr(a: f64, x: f64) -> f64 {
    statrs::function::gamma::gamma_lr(a, x)
}

/// CDF of `chi2'_nu(lambda) / (2c)` as a Poisson mixture of central
/// chi-square CDFs.
pub fn scaled_ncx2_cdf(x: f64, nu: f64, c: f64, lambda: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let mu = 0.5 * lambda;
    let half = c * x;
    let mut total = 0.0;
    let mut log_w = -mu;
    let mut mass = 0.0;
    let mut k = 0.0;
    loop {
        let w = log_w.exp();
        total += w * gamma_lr(0.5 * nu + k, half);
        mass += w;
        if 1.0 - mass < 1e-14 && k > mu {
            break;
        }
        k += 1.0;
        log_w += mu.ln() - k.ln();
        if k > 10_000.0 {
            break;
        }
    }
    total
}
