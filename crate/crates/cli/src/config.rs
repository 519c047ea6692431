//! Run configuration: one JSON document, every field optional.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cyclewarp_core::bootstrap::BootstrapConfig;
use cyclewarp_core::init::InitConfig;
use cyclewarp_core::pipeline::{EstimateConfig, PreprocessConfig};
use cyclewarp_core::saem::SaemConfig;
use cyclewarp_core::simulate::StudyBoxes;
use cyclewarp_core::ModelParams;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    /// Signal CSV for `fit`.
    pub input: Option<PathBuf>,
    pub out: PathBuf,
    pub preprocess: PreprocessConfig,
    pub init: InitConfig,
    pub saem: SaemConfig,
    pub simulate: SimulateConfig,
    pub bootstrap: BootstrapSection,
    pub aggregate: AggregateConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            threads: None,
            input: None,
            out: PathBuf::from("out"),
            preprocess: PreprocessConfig::default(),
            init: InitConfig::default(),
            saem: SaemConfig::default(),
            simulate: SimulateConfig::default(),
            bootstrap: BootstrapSection::default(),
            aggregate: AggregateConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Parameters given directly instead of drawn from the study boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrueParams {
    #[serde(rename = "A")]
    pub amp_sin: f64,
    #[serde(rename = "B")]
    pub amp_cos: f64,
    #[serde(rename = "b")]
    pub phase: f64,
    #[serde(rename = "a")]
    pub mean_rate: f64,
    pub beta: f64,
    pub omega2: f64,
    pub sigma2: f64,
}

impl TrueParams {
    pub fn to_params(self, delta: f64) -> ModelParams {
        ModelParams::new(
            self.amp_sin,
            self.amp_cos,
            self.phase,
            self.mean_rate,
            self.beta,
            self.omega2,
            self.sigma2,
            delta,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub count: usize,
    /// Number of intervals; each signal has `n + 1` samples.
    pub n: usize,
    pub delta: f64,
    pub substeps: usize,
    pub params: Option<TrueParams>,
    pub boxes: StudyBoxes,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { count: 1, n: 400, delta: 1.0, substeps: 100, params: None, boxes: StudyBoxes::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub replicates: usize,
    pub warm_start: bool,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        Self { replicates: 100, warm_start: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateConfig {
    pub death_year: f64,
    pub level: f64,
    pub combinations: usize,
    /// Fail when a segment has no bootstrap output instead of omitting
    /// the interval.
    pub require_ci: bool,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self { death_year: 2010.0, level: 0.95, combinations: 100_000, require_ci: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub signals: usize,
    pub n: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { signals: 40, n: 400 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn estimate(&self) -> EstimateConfig {
        EstimateConfig { preprocess: self.preprocess, init: self.init, saem: self.saem }
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            replicates: self.bootstrap.replicates,
            init: self.init,
            saem: self.saem,
            warm_start: self.bootstrap.warm_start,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.saem.validate()?;
        let p = &self.preprocess;
        if !(p.window_fraction > 0.0 && p.window_fraction <= 0.5) {
            bail!("preprocess.window_fraction must lie in (0, 0.5]");
        }
        if self.bootstrap.replicates < 1 {
            bail!("bootstrap.replicates must be at least 1");
        }
        let a = &self.aggregate;
        if !(a.level > 0.0 && a.level < 1.0) {
            bail!("aggregate.level must lie in (0, 1)");
        }
        if a.combinations < 1 {
            bail!("aggregate.combinations must be at least 1");
        }
        let s = &self.simulate;
        if s.n < 2 || !(s.delta > 0.0) || s.substeps < 1 {
            bail!("simulate needs n >= 2, delta > 0 and substeps >= 1");
        }
        if self.threads == Some(0) {
            bail!("threads must be at least 1");
        }
        Ok(())
    }
}
