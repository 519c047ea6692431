//! Gluing fitted segments into one growth process, dating observations
//! and combining bootstrap replicates into an age interval.

use std::f64::consts::TAU;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{percentile_ci, BootstrapRun};
use crate::error::{Error, Result};
use crate::model::Signal;
use crate::rng::Stream;
use crate::saem::FitResult;

/// Combinations drawn per parallel chunk in [`age_ci`].
const COMBINATION_CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub signal: Signal,
    pub fit: FitResult,
    pub bootstrap: Option<BootstrapRun>,
}

/// Fitted segments in chronological order, the first one being the
/// oldest, without gaps between them.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet {
    pub segments: Vec<Segment>,
    /// Calendar year of the last observation of the last segment.
    pub death_year: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedGrowth {
    pub g: Vec<f64>,
    /// Index into `g` of the first observation of each segment, plus the
    /// total length at the end.
    pub offsets: Vec<usize>,
    /// Terminal phase in cycles.
    pub age: f64,
}

impl AggregatedGrowth {
    pub fn segment_of(&self, k: usize) -> usize {
        self.offsets.partition_point(|&o| o <= k) - 1
    }
}

/// Terminal-phase sums: every segment continues from where the previous
/// one ended. Each segment path starts at zero phase, so the junctions
/// repeat a value.
pub fn aggregate_paths(paths: &[&[f64]]) -> Result<AggregatedGrowth> {
    if paths.is_empty() {
        return Err(Error::Config("no segments to aggregate".into()));
    }
    let mut g = Vec::with_capacity(paths.iter().map(|p| p.len()).sum());
    let mut offsets = Vec::with_capacity(paths.len() + 1);
    let mut carry = 0.0;
    for p in paths {
        let Some(&last) = p.last() else {
            return Err(Error::Config("empty segment path".into()));
        };
        offsets.push(g.len());
        g.extend(p.iter().map(|v| carry + v));
        carry += last;
    }
    offsets.push(g.len());
    let age = carry / TAU;
    Ok(AggregatedGrowth { g, offsets, age })
}

pub fn aggregate(set: &SegmentSet) -> Result<AggregatedGrowth> {
    for (j, s) in set.segments.iter().enumerate() {
        if s.fit.path.len() != s.signal.len() {
            return Err(Error::Config(format!("segment {j}: fit does not match its signal")));
        }
    }
    let paths: Vec<&[f64]> = set.segments.iter().map(|s| s.fit.path.g.as_slice()).collect();
    aggregate_paths(&paths)
}

/// `death_year - (g_total - g_k) / 2pi` for every observation.
pub fn date_observations(agg: &AggregatedGrowth, death_year: f64) -> Vec<f64> {
    let total = agg.g.last().copied().unwrap_or(0.0);
    agg.g.iter().map(|&gk| death_year - (total - gk) / TAU).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeEstimate {
    /// Age from the aggregated point estimates, in cycles.
    pub age: f64,
    /// `age` rounded half to even.
    pub headline: f64,
    pub low: f64,
    pub high: f64,
    pub level: f64,
    pub combinations: usize,
}

/// Sums of one uniformly drawn replicate count per segment.
pub fn combine_replicates(replicates: &[Vec<f64>], combinations: usize, stream: Stream) -> Result<Vec<f64>> {
    if replicates.is_empty() {
        return Err(Error::Config("no segments to combine".into()));
    }
    if let Some(j) = replicates.iter().position(|r| r.is_empty()) {
        return Err(Error::Config(format!("segment {j} has no bootstrap replicates")));
    }
    let chunks = combinations.div_ceil(COMBINATION_CHUNK);
    Ok((0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = stream.child(c as u64).rng();
            let len = COMBINATION_CHUNK.min(combinations - c * COMBINATION_CHUNK);
            (0..len)
                .map(|_| replicates.iter().map(|r| r[rng.random_range(0..r.len())]).sum::<f64>())
                .collect::<Vec<_>>()
        })
        .collect())
}

/// Point age from the aggregated fits and a percentile interval from
/// random combinations of per-segment bootstrap cycle counts.
pub fn age_ci(set: &SegmentSet, combinations: usize, level: f64, stream: Stream) -> Result<AgeEstimate> {
    if combinations < 1 {
        return Err(Error::Config("at least one combination is required".into()));
    }
    let age = aggregate(set)?.age;
    let mut reps = Vec::with_capacity(set.segments.len());
    for (j, s) in set.segments.iter().enumerate() {
        match &s.bootstrap {
            Some(run) if !run.estimates.is_empty() => reps.push(run.cycles()),
            _ => return Err(Error::Config(format!("segment {j} has no bootstrap replicates"))),
        }
    }
    let sums = combine_replicates(&reps, combinations, stream)?;
    let (low, high) = percentile_ci(&sums, level)?;
    Ok(AgeEstimate { age, headline: age.round_ties_even(), low, high, level, combinations })
}
