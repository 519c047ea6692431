//! Raw signal to fitted model: centering, amplitude normalization,
//! initialization and the estimation loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{initialize, InitConfig};
use crate::model::Signal;
use crate::preprocess::{center, normalize_amplitude};
use crate::rng::Stream;
use crate::saem::{fit, FitResult, SaemConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub center: bool,
    pub normalize: bool,
    /// Envelope smoothing window as a fraction of the signal length.
    pub window_fraction: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { center: true, normalize: true, window_fraction: 0.10 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateConfig {
    pub preprocess: PreprocessConfig,
    pub init: InitConfig,
    pub saem: SaemConfig,
}

pub fn prepare(signal: &Signal, config: &PreprocessConfig) -> Result<Signal> {
    let mut out = if config.center { center(signal) } else { signal.clone() };
    if config.normalize {
        out = normalize_amplitude(&out, config.window_fraction)?.0;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    /// The signal the model was fitted to, after preprocessing.
    pub signal: Signal,
    pub fit: FitResult,
}

pub fn estimate(raw: &Signal, config: &EstimateConfig, stream: Stream) -> Result<Estimate> {
    let signal = prepare(raw, &config.preprocess)?;
    if signal.len() < 3 {
        return Err(Error::InvalidSignal("need at least 3 samples to fit".into()));
    }
    let init = initialize(&signal, &config.init, config.saem.quadrature, stream.named("init"))?;
    let fit = fit(&signal, &config.saem, &init, stream.named("fit"))?;
    Ok(Estimate { signal, fit })
}
