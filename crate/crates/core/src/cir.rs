//! Square-root (CIR) diffusion for the instantaneous growth rate:
//! `d xi = -beta (xi - a) dx + omega sqrt(xi) dW`.
//!
//! Over a step `delta` the rate moves according to a scaled non-central
//! chi-square law, `xi' | xi ~ Z / (2c)` with `Z ~ chi2'_nu(2 c rho xi)`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{GrowthPath, ModelParams};
use crate::rng::Stream;

/// Non-centrality above which the log-density switches from the Poisson
/// series to a saddlepoint approximation.
pub const SADDLEPOINT_LAMBDA: f64 = 1e4;

/// Series terms this far (in log units) below the running maximum are dropped.
const SERIES_CUTOFF: f64 = 40.0;

/// Exact one-step transition law of the growth rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionLaw {
    /// Degrees of freedom `4 a beta / omega^2`.
    pub nu: f64,
    /// Scale `2 beta / ((1 - rho) omega^2)`.
    pub c: f64,
    pub rho: f64,
    // Gamma((nu - 1) / 2, 1) for the decomposition used when nu > 1
    rest: Option<Gamma<f64>>,
}

impl TransitionLaw {
    pub fn new(nu: f64, c: f64, rho: f64) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) || !(c > 0.0 && c.is_finite()) || !(rho > 0.0 && rho < 1.0) {
            return Err(Error::InvalidParams(format!(
                "transition law needs nu > 0, c > 0, rho in (0,1); got nu = {nu}, c = {c}, rho = {rho}"
            )));
        }
        let rest = if nu > 1.0 { Gamma::new(0.5 * (nu - 1.0), 1.0).ok() } else { None };
        Ok(Self { nu, c, rho, rest })
    }

    pub fn from_params(params: &ModelParams, delta: f64) -> Result<Self> {
        Self::from_rates(params.mean_rate, params.beta, params.omega2, delta)
    }

    pub fn from_rates(mean_rate: f64, beta: f64, omega2: f64, delta: f64) -> Result<Self> {
        let rho = (-delta * beta).exp();
        let nu = 4.0 * mean_rate * beta / omega2;
        let c = 2.0 * beta / ((1.0 - rho) * omega2);
        Self::new(nu, c, rho)
    }

    /// Non-centrality `lambda = 2 c rho xi_prev`.
    pub fn noncentrality(&self, xi_prev: f64) -> f64 {
        2.0 * self.c * self.rho * xi_prev
    }

    /// `E[xi' | xi] = (nu + lambda) / (2c)`.
    pub fn conditional_mean(&self, xi_prev: f64) -> f64 {
        (self.nu + self.noncentrality(xi_prev)) / (2.0 * self.c)
    }

    /// `Var[xi' | xi] = (2 nu + 4 lambda) / (4 c^2)`.
    pub fn conditional_variance(&self, xi_prev: f64) -> f64 {
        (2.0 * self.nu + 4.0 * self.noncentrality(xi_prev)) / (4.0 * self.c * self.c)
    }

    /// Draws the next rate.
    ///
    /// For `nu > 1` uses `chi2'_nu(lambda) = (N + sqrt(lambda))^2 + chi2_{nu-1}`;
    /// otherwise the Poisson mixture `K ~ Poisson(lambda / 2)`,
    /// `Z ~ chi2_{nu + 2K}`. Both are exact.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, xi_prev: f64, rng: &mut R) -> f64 {
        let half_lambda = self.c * self.rho * xi_prev.max(0.0);
        if let Some(rest) = &self.rest {
            let n: f64 = rng.sample(StandardNormal);
            let shifted = n + (2.0 * half_lambda).sqrt();
            // chi2_m / 2 is Gamma(m / 2, 1), so Z / (2c) = shifted^2 / (2c) + Gamma / c
            return (0.5 * shifted * shifted + rest.sample(rng)) / self.c;
        }
        let k = if half_lambda > 0.0 {
            match Poisson::new(half_lambda) {
                Ok(p) => p.sample(rng),
                // beyond the sampler's range the Poisson is indistinguishable from its mean
                Err(_) => half_lambda.round(),
            }
        } else {
            0.0
        };
        let shape = 0.5 * self.nu + k;
        let gamma = Gamma::new(shape, 1.0).expect("positive shape");
        gamma.sample(rng) / self.c
    }

    /// Log transition density of `xi_next` given `xi_prev`.
    pub fn log_density(&self, xi_next: f64, xi_prev: f64) -> f64 {
        if !(xi_next > 0.0) || xi_prev < 0.0 || !xi_next.is_finite() {
            return f64::NEG_INFINITY;
        }
        let z = 2.0 * self.c * xi_next;
        let lambda = self.noncentrality(xi_prev);
        let log_jacobian = (2.0 * self.c).ln();
        if lambda > SADDLEPOINT_LAMBDA {
            log_jacobian + ncx2_log_density_saddlepoint(z, self.nu, lambda)
        } else {
            log_jacobian + ncx2_log_density_series(z, self.nu, lambda)
        }
    }
}

fn central_chi2_log_density(z: f64, dof: f64) -> f64 {
    let half = 0.5 * dof;
    (half - 1.0) * z.ln() - 0.5 * z - half * std::f64::consts::LN_2 - ln_gamma(half)
}

/// Poisson-weighted series of central chi-square densities, summed in log
/// space outward from the dominant term.
pub fn ncx2_log_density_series(z: f64, nu: f64, lambda: f64) -> f64 {
    if !(z > 0.0) {
        return f64::NEG_INFINITY;
    }
    if lambda <= 0.0 {
        return central_chi2_log_density(z, nu);
    }
    let mu = 0.5 * lambda;
    let ln_mu = mu.ln();
    let ln_z = z.ln();
    let half_nu = 0.5 * nu;
    let term = |k: f64| {
        -mu + k * ln_mu - ln_gamma(k + 1.0) + (half_nu + k - 1.0) * ln_z
            - 0.5 * z
            - (half_nu + k) * std::f64::consts::LN_2
            - ln_gamma(half_nu + k)
    };
    // ratio of consecutive terms is mu z / (2 (k+1)(nu/2 + k)); the peak is
    // near the positive root of (k+1)(k + nu/2) = mu z / 2
    let p = half_nu + 1.0;
    let q = half_nu - 0.5 * mu * z;
    let root = 0.5 * (-p + (p * p - 4.0 * q).max(0.0).sqrt());
    let k0 = root.max(0.0).floor();

    let peak = term(k0);
    let mut sum = 1.0;
    let mut k = k0 + 1.0;
    loop {
        let t = term(k) - peak;
        if t < -SERIES_CUTOFF {
            break;
        }
        sum += t.exp();
        k += 1.0;
    }
    let mut k = k0 - 1.0;
    while k >= 0.0 {
        let t = term(k) - peak;
        if t < -SERIES_CUTOFF {
            break;
        }
        sum += t.exp();
        k -= 1.0;
    }
    peak + sum.ln()
}

/// Saddlepoint approximation of the non-central chi-square log-density.
pub fn ncx2_log_density_saddlepoint(z: f64, nu: f64, lambda: f64) -> f64 {
    if !(z > 0.0) {
        return f64::NEG_INFINITY;
    }
    // K(t) = -(nu/2) ln(1-2t) + lambda t / (1-2t); with u = 1/(1-2t),
    // K'(t) = nu u + lambda u^2 = z
    let u = (-nu + (nu * nu + 4.0 * lambda * z).sqrt()) / (2.0 * lambda);
    let t = 0.5 * (1.0 - 1.0 / u);
    let k = 0.5 * nu * u.ln() + 0.5 * lambda * (u - 1.0);
    let k2 = 2.0 * nu * u * u + 4.0 * lambda * u * u * u;
    k - t * z - 0.5 * (std::f64::consts::TAU * k2).ln()
}

/// Moments of the stationary Gamma law of the growth rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationaryMoments {
    pub mean: f64,
    pub variance: f64,
    pub shape: f64,
    pub scale: f64,
}

/// Stationary mean `a`, variance `a omega^2 / (2 beta)` and the Gamma shape
/// and scale. Requires the Feller condition.
pub fn stationary_moments(params: &ModelParams) -> Result<StationaryMoments> {
    if !(params.mean_rate > 0.0 && params.beta > 0.0 && params.omega2 > 0.0) {
        return Err(Error::InvalidParams("a, beta and omega2 must be positive".into()));
    }
    if !params.feller_holds() {
        return Err(Error::InvalidParams(format!(
            "no stationary regime: 2 a beta = {} < omega2 = {}",
            2.0 * params.mean_rate * params.beta,
            params.omega2
        )));
    }
    let scale = params.omega2 / (2.0 * params.beta);
    Ok(StationaryMoments {
        mean: params.mean_rate,
        variance: params.gamma2(),
        shape: 2.0 * params.beta * params.mean_rate / params.omega2,
        scale,
    })
}

/// Euler-Maruyama simulation of the growth rate with `substeps` fine steps
/// per grid interval. Negative excursions are truncated to zero before the
/// square root and in the recorded rate; the phase is accumulated with the
/// left rectangle rule on the fine grid.
///
/// Returns `n + 1` coarse-grid points. Parameters violating the Feller
/// condition are accepted here.
pub fn simulate_path(
    params: &ModelParams,
    n: usize,
    delta: f64,
    substeps: usize,
    xi0: f64,
    stream: Stream,
) -> Result<GrowthPath> {
    if substeps == 0 {
        return Err(Error::Config("substeps must be at least 1".into()));
    }
    if !(delta > 0.0) || !(params.mean_rate > 0.0) || !(params.beta > 0.0) || params.omega2 < 0.0 {
        return Err(Error::InvalidParams("simulation needs delta, a, beta > 0 and omega2 >= 0".into()));
    }
    let mut rng = stream.rng();
    let h = delta / substeps as f64;
    let sqrt_h = h.sqrt();
    let omega = params.omega2.sqrt();
    let mut xi = Vec::with_capacity(n + 1);
    let mut g = Vec::with_capacity(n + 1);
    let mut state = xi0.max(0.0);
    let mut phase = 0.0;
    xi.push(state);
    g.push(0.0);
    for _ in 0..n {
        let mut acc = 0.0;
        for _ in 0..substeps {
            let pos = state.max(0.0);
            acc += pos * h;
            let dw: f64 = rng.sample(StandardNormal);
            state = state - params.beta * (pos - params.mean_rate) * h + omega * pos.sqrt() * sqrt_h * dw;
        }
        phase += acc;
        xi.push(state.max(0.0));
        g.push(phase);
    }
    Ok(GrowthPath { xi, g })
}

/// Rate path sampled with the exact transition law (no discretization), as
/// used to check estimators on a directly observed process.
pub fn sample_exact_rates(law: &TransitionLaw, n: usize, xi0: f64, stream: Stream) -> Vec<f64> {
    let mut rng = stream.rng();
    let mut out = Vec::with_capacity(n + 1);
    let mut x = xi0;
    out.push(x);
    for _ in 0..n {
        x = law.sample(x, &mut rng);
        out.push(x);
    }
    out
}
