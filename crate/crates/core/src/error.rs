use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),

    #[error("invalid signal: {0}")]
    InvalidSignal(String),

    #[error("x grid is not equidistant at index {index} (step {step}, expected {expected})")]
    NonEquidistant { index: usize, step: f64, expected: f64 },

    #[error("degenerate growth path: {0}")]
    DegeneratePath(String),

    #[error("zero envelope over samples {start}..={end}; cannot normalize")]
    ZeroEnvelope { start: usize, end: usize },

    #[error("loess span {span} covers {points} points; at least {min} are needed")]
    SpanTooSmall { span: f64, points: usize, min: usize },

    #[error("particle weights collapsed at step {step}")]
    WeightCollapse { step: usize },

    #[error("all {candidates} phase candidates failed; first failure: {first}")]
    AllCandidatesFailed { candidates: usize, first: String },

    #[error("fit failed after {iterations} iterations: {reason}")]
    FitFailure { iterations: usize, reason: String },

    #[error("bootstrap failed: {failed} of {total} replicates did not produce an estimate")]
    BootstrapFailed { failed: usize, total: usize },

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    /// Numerical failures (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegeneratePath(_)
                | Error::WeightCollapse { .. }
                | Error::AllCandidatesFailed { .. }
                | Error::FitFailure { .. }
                | Error::BootstrapFailed { .. }
                | Error::ZeroEnvelope { .. }
        )
    }
}
