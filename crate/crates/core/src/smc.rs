//! Bootstrap particle filter for the growth rate and the phase grid search
//! built on top of it.
//!
//! Particles are propagated with the exact transition law, so the
//! importance weight of a particle reduces to the Gaussian density of the
//! current observation. Whole trajectories are resampled; internally this
//! is stored as a per-step parent index ("ancestry") instead of copying
//! trajectories, and [`ParticleEnsemble::trajectory`] walks the genealogy
//! back to recover a resampled path.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cir::TransitionLaw;
use crate::error::{Error, Result};
use crate::model::{complete_log_likelihood, signal_mean, wrap_phase, GrowthPath, ModelParams, Quadrature, Signal};
use crate::rng::{Stream, StreamRng};
use crate::saem::step_size;

/// Particles per work unit. Random substreams are keyed by chunk, so the
/// output does not depend on how chunks are scheduled on threads.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    #[default]
    Multinomial,
    Systematic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmcConfig {
    pub n_particles: usize,
    pub resampling: Resampling,
    pub quadrature: Quadrature,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self { n_particles: 1500, resampling: Resampling::Multinomial, quadrature: Quadrature::Trapezoid }
    }
}

/// Output of one filter pass.
///
/// `xi` and `g` hold, for every step, the propagated particles before that
/// step's resampling; `parents[i][j]` is the slot at step `i - 1` that slot
/// `j` at step `i` descends from. `weights` are the normalized weights of
/// the last step.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    n_particles: usize,
    steps: usize,
    xi: Vec<f64>,
    g: Vec<f64>,
    parents: Vec<u32>,
    roots: Vec<u32>,
    weights: Vec<f64>,
    ess: Vec<f64>,
    weight_sum_error: Vec<f64>,
    log_evidence: f64,
}

impl ParticleEnsemble {
    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    /// Number of time points, `n + 1`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Effective sample size `1 / sum w^2` after each normalization
    /// (index 0 is the uniform initial ensemble).
    pub fn ess(&self) -> &[f64] {
        &self.ess
    }

    /// Log of the filter's likelihood estimate, without the Gaussian
    /// normalizing constant (which depends only on `sigma2` and `n`).
    pub fn log_evidence(&self) -> f64 {
        self.log_evidence
    }

    /// `|sum w - 1|` after each normalization.
    pub fn weight_sum_error(&self) -> &[f64] {
        &self.weight_sum_error
    }

    /// Parent slots used at step `i` (identity at step 0).
    pub fn ancestry(&self, step: usize) -> &[u32] {
        let p = self.n_particles;
        &self.parents[step * p..(step + 1) * p]
    }

    /// Propagated rates of all slots at `step`, before resampling.
    pub fn rates_at(&self, step: usize) -> &[f64] {
        let p = self.n_particles;
        &self.xi[step * p..(step + 1) * p]
    }

    /// Initial particle that final slot `j` descends from.
    pub fn root_of(&self, j: usize) -> usize {
        self.roots[j] as usize
    }

    /// Full resampled trajectory ending in final slot `j`.
    pub fn trajectory(&self, j: usize) -> GrowthPath {
        let p = self.n_particles;
        let mut xi = vec![0.0; self.steps];
        let mut g = vec![0.0; self.steps];
        let mut k = j;
        for i in (0..self.steps).rev() {
            xi[i] = self.xi[i * p + k];
            g[i] = self.g[i * p + k];
            k = self.parents[i * p + k] as usize;
        }
        GrowthPath { xi, g }
    }

    /// Rows are the trajectories of the final particles.
    pub fn xi_matrix(&self) -> Vec<Vec<f64>> {
        (0..self.n_particles).map(|j| self.trajectory(j).xi).collect()
    }

    pub fn g_matrix(&self) -> Vec<Vec<f64>> {
        (0..self.n_particles).map(|j| self.trajectory(j).g).collect()
    }

    /// Draws a final slot with probability equal to its weight.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random::<f64>();
        let mut acc = 0.0;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return j;
            }
        }
        // u landed in the rounding slack above the last cumulative sum
        self.weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    /// Weighted mean trajectory (diagnostic only).
    pub fn mean_path(&self) -> GrowthPath {
        let mut xi = vec![0.0; self.steps];
        let mut g = vec![0.0; self.steps];
        for (j, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let t = self.trajectory(j);
            for i in 0..self.steps {
                xi[i] += w * t.xi[i];
                g[i] += w * t.g[i];
            }
        }
        GrowthPath { xi, g }
    }
}

/// Runs the filter for a fixed parameter vector. Every particle starts at
/// `xi_0 = a`.
pub fn smc_filter(signal: &Signal, params: &ModelParams, config: &SmcConfig, stream: Stream) -> Result<ParticleEnsemble> {
    params.validate(signal.delta())?;
    let law = TransitionLaw::from_params(params, signal.delta())?;
    let start = vec![params.mean_rate; config.n_particles];
    run_filter(signal, params, &start, config, stream, |_, prev, rng| law.sample(prev, rng))
}

/// Filter where each initial particle may carry its own dynamics.
/// `transition(root, xi_prev, rng)` draws the next rate for a particle whose
/// lineage starts at initial particle `root`.
pub(crate) fn run_filter<F>(
    signal: &Signal,
    obs: &ModelParams,
    start: &[f64],
    config: &SmcConfig,
    stream: Stream,
    transition: F,
) -> Result<ParticleEnsemble>
where
    F: Fn(usize, f64, &mut StreamRng) -> f64 + Sync,
{
    let n_p = config.n_particles;
    if n_p < 2 {
        return Err(Error::Config(format!("need at least 2 particles, got {n_p}")));
    }
    if start.len() != n_p {
        return Err(Error::Config("one starting rate per particle is required".into()));
    }
    if n_p > u32::MAX as usize {
        return Err(Error::Config("too many particles".into()));
    }
    let steps = signal.len();
    let delta = signal.delta();
    let y = signal.y();
    let inv_two_s2 = 0.5 / obs.sigma2;
    let rule = config.quadrature;

    let mut xi = vec![0.0; steps * n_p];
    let mut g = vec![0.0; steps * n_p];
    let mut parents = vec![0u32; steps * n_p];
    xi[..n_p].copy_from_slice(start);
    for (j, p) in parents[..n_p].iter_mut().enumerate() {
        *p = j as u32;
    }
    let mut roots: Vec<u32> = (0..n_p as u32).collect();
    let mut weights = vec![1.0 / n_p as f64; n_p];
    let mut ess = Vec::with_capacity(steps);
    let mut weight_sum_error = Vec::with_capacity(steps);
    ess.push(n_p as f64);
    weight_sum_error.push(0.0);

    let mut logw = vec![0.0; n_p];
    let resample_stream = stream.named("resample");
    let propagate_stream = stream.named("propagate");
    let mut selected: Vec<u32> = (0..n_p as u32).collect();
    let mut log_evidence = 0.0;

    for i in 1..steps {
        let (done, rest) = xi.split_at_mut(i * n_p);
        let xi_prev = &done[(i - 1) * n_p..];
        let xi_now = &mut rest[..n_p];
        let (gdone, grest) = g.split_at_mut(i * n_p);
        let g_prev = &gdone[(i - 1) * n_p..];
        let g_now = &mut grest[..n_p];
        parents[i * n_p..(i + 1) * n_p].copy_from_slice(&selected);
        let step_stream = propagate_stream.child(i as u64);
        let yi = y[i];
        let sel = &selected;
        let roots_ref = &roots;
        let transition = &transition;

        xi_now
            .par_chunks_mut(CHUNK)
            .zip(g_now.par_chunks_mut(CHUNK))
            .zip(logw.par_chunks_mut(CHUNK))
            .enumerate()
            .for_each(|(c, ((xs, gs), ls))| {
                let mut rng = step_stream.child(c as u64).rng();
                for k in 0..xs.len() {
                    let parent = sel[c * CHUNK + k] as usize;
                    let prev = xi_prev[parent];
                    let next = transition(roots_ref[parent] as usize, prev, &mut rng);
                    let gn = rule.step(g_prev[parent], prev, next, delta);
                    let r = yi - signal_mean(gn, obs);
                    xs[k] = next;
                    gs[k] = gn;
                    ls[k] = -r * r * inv_two_s2;
                }
            });

        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::WeightCollapse { step: i });
        }
        let mut total = 0.0;
        for (w, &l) in weights.iter_mut().zip(&logw) {
            *w = (l - max).exp();
            total += *w;
        }
        log_evidence += max + (total / n_p as f64).ln();
        let inv = 1.0 / total;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for w in weights.iter_mut() {
            *w *= inv;
            sum += *w;
            sq += *w * *w;
        }
        ess.push(1.0 / sq);
        weight_sum_error.push((sum - 1.0).abs());

        // the last step keeps its weights; selecting a final index by weight
        // is equivalent to resampling once more and picking uniformly
        if i + 1 < steps {
            let mut rng = resample_stream.child(i as u64).rng();
            match config.resampling {
                Resampling::Multinomial => multinomial_indices(&weights, &mut rng, &mut selected),
                Resampling::Systematic => systematic_indices(&weights, &mut rng, &mut selected),
            }
        }
        // lineage roots of the slots at step i
        let new_roots: Vec<u32> = (0..n_p).map(|j| roots[parents[i * n_p + j] as usize]).collect();
        roots = new_roots;
    }

    Ok(ParticleEnsemble {
        n_particles: n_p,
        steps,
        xi,
        g,
        parents,
        roots,
        weights,
        ess,
        weight_sum_error,
        log_evidence,
    })
}

/// Multinomial resampling by merging sorted uniforms (built from
/// exponential spacings) against the cumulative weights.
pub fn multinomial_indices<R: Rng + ?Sized>(weights: &[f64], rng: &mut R, out: &mut Vec<u32>) {
    let n = weights.len();
    out.clear();
    let mut spacings: Vec<f64> = Vec::with_capacity(n + 1);
    let mut total = 0.0;
    for _ in 0..=n {
        let e: f64 = Exp1.sample(rng);
        total += e;
        spacings.push(total);
    }
    let scale = 1.0 / total;
    let mut cum = weights[0];
    let mut j = 0;
    for &s in &spacings[..n] {
        let u = s * scale;
        while u >= cum && j + 1 < n {
            j += 1;
            cum += weights[j];
        }
        out.push(j as u32);
    }
}

pub fn systematic_indices<R: Rng + ?Sized>(weights: &[f64], rng: &mut R, out: &mut Vec<u32>) {
    let n = weights.len();
    out.clear();
    let offset: f64 = rng.random::<f64>();
    let mut cum = weights[0];
    let mut j = 0;
    for k in 0..n {
        let u = (k as f64 + offset) / n as f64;
        while u >= cum && j + 1 < n {
            j += 1;
            cum += weights[j];
        }
        out.push(j as u32);
    }
}

/// Half-width of the phase grid at iteration `m`: `pi` during the first
/// `m0` iterations, then `pi (m - m0)^-0.8`.
pub fn grid_half_width(m: usize, m0: usize) -> f64 {
    PI * step_size(m, m0)
}

/// `G` equidistant phase candidates spanning `b +- w`, wrapped to `[0, 2pi)`.
pub fn phase_grid(center: f64, half_width: f64, count: usize) -> Vec<f64> {
    let step = 2.0 * half_width / (count - 1) as f64;
    (0..count).map(|j| wrap_phase(center - half_width + j as f64 * step)).collect()
}

/// Result of the phase grid search.
#[derive(Debug, Clone)]
pub struct GridResult {
    pub b_star: f64,
    pub best: usize,
    pub path: GrowthPath,
    pub candidates: Vec<f64>,
    /// Complete log-likelihood of the path sampled for each candidate;
    /// `-inf` marks a failed candidate.
    pub loglik_per_candidate: Vec<f64>,
    pub half_width: f64,
    /// Smallest effective sample size seen by the winning filter.
    pub min_ess: f64,
}

/// Index of the largest finite value; ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(j),
        }
    }
    best
}

/// Runs one filter per phase candidate around `params.phase` and keeps the
/// candidate whose sampled path has the largest complete log-likelihood.
pub fn smc_plus(
    signal: &Signal,
    params: &ModelParams,
    m: usize,
    m0: usize,
    grid_size: usize,
    config: &SmcConfig,
    stream: Stream,
) -> Result<GridResult> {
    if grid_size < 2 {
        return Err(Error::Config(format!("phase grid needs at least 2 candidates, got {grid_size}")));
    }
    let w = grid_half_width(m, m0);
    let candidates = phase_grid(params.phase, w, grid_size);

    let runs: Vec<Result<(GrowthPath, f64, f64)>> = candidates
        .par_iter()
        .enumerate()
        .map(|(j, &b)| {
            let p = params.with_phase(b);
            let s = stream.child(j as u64);
            let ens = smc_filter(signal, &p, config, s)?;
            let idx = ens.sample_index(&mut s.named("select").rng());
            let path = ens.trajectory(idx);
            let ll = complete_log_likelihood(signal, &path, &p)?;
            let min_ess = ens.ess().iter().copied().fold(f64::INFINITY, f64::min);
            Ok((path, ll, min_ess))
        })
        .collect();

    let loglik: Vec<f64> = runs
        .iter()
        .map(|r| match r {
            Ok((_, ll, _)) => *ll,
            Err(_) => f64::NEG_INFINITY,
        })
        .collect();
    let Some(best) = argmax_first(&loglik) else {
        let first = runs
            .iter()
            .find_map(|r| r.as_ref().err().map(|e| e.to_string()))
            .unwrap_or_else(|| "non-finite log-likelihood".into());
        return Err(Error::AllCandidatesFailed { candidates: grid_size, first });
    };
    let (path, _, min_ess) = runs.into_iter().nth(best).unwrap().unwrap();
    Ok(GridResult {
        b_star: candidates[best],
        best,
        path,
        candidates,
        loglik_per_candidate: loglik,
        half_width: w,
        min_ess,
    })
}
