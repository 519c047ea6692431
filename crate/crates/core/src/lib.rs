//! Stochastic time-warping model for quasi-periodic signals: a sinusoidal
//! regression driven by a square-root diffusion growth rate, estimated with
//! particle filtering and stochastic approximation EM.

// `!(x > 0.0)` is deliberate: NaN has to fail these checks
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod bootstrap;
pub mod cir;
pub mod error;
pub mod init;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod saem;
pub mod simulate;
pub mod smc;

pub use error::{Error, Result};
pub use model::{GrowthPath, ModelParams, Quadrature, Signal};
pub use rng::Stream;
