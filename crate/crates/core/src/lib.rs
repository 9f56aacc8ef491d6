//! Variational free-energy multiuser detection for synchronous CDMA.
//!
//! Detectors are written as minimisers of a variational free energy over a
//! restricted family of beliefs about the transmitted symbols. The crate
//! covers linear and SIC detectors, Gaussian, discrete (mean-field) and
//! decision-feedback soft-in-soft-out detectors, the turbo loop with a
//! convolutional code, variational EM for unknown amplitudes and noise level,
//! exact enumeration oracles and a Monte-Carlo harness.

pub mod channel;
pub mod coding;
pub mod detect_linear;
pub mod error;
pub mod exec;
pub mod harness;
pub mod linalg;
pub mod llr;
pub mod oracle;
pub mod siso_ddf;
pub mod siso_discrete;
pub mod siso_gaussian;
pub mod turbo;
pub mod varem;

pub use channel::{make_equicorrelated, make_random_spreading, ChannelInstance, Observation, SymbolBlock};
pub use error::{Error, Result};
pub use exec::Execution;
pub use turbo::{run_turbo, DetectorKind, LlrFrame, Schedule, TurboOptions, TurboState};

