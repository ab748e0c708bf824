//! Sequential Monte Carlo inference for general-state-space hidden Markov
//! models with Gaussian linear dynamics: twisted particle filtering,
//! offline controlled SMC, and online rolling controlled SMC, together with
//! exact oracles for validating them.
//!
//! The pieces, bottom up:
//!
//! - [`model`]: the HMM family (Gaussian linear dynamics, three observation
//!   variants) and simulation.
//! - [`twist`]: exponential-quadratic twisting functions and the
//!   Gaussian-conjugate twisted kernels.
//! - [`particle`]: particle systems, log-weight arithmetic, ESS,
//!   resampling, lineage reconstruction.
//! - [`filter`]: the twisted auxiliary particle filter step and multi-step
//!   drivers (the bootstrap filter is the unit-twist special case).
//! - [`learn`]: backward twist targets and diagonal-quadratic fits on the
//!   log scale.
//! - [`control`]: the offline iterated controller and the online
//!   rolling-window controller with its dual filters.
//! - [`oracle`]: Kalman filter/RTS smoother, dense-grid filter, twisted
//!   quadrature, Wasserstein-1 distance to a Gaussian.
//! - [`stream`]: deterministic random-stream derivation.

pub mod control;
pub mod error;
pub mod filter;
pub mod learn;
pub mod model;
pub mod oracle;
pub mod particle;
pub mod stream;
pub mod twist;

pub use control::{csmc, run_orcsmc, CsmcConfig, CsmcRun, OnlineOutput, OrcsmcConfig, WindowState};
pub use error::{Result, SmcError};
pub use filter::{psi_apf_step, run_bpf, run_filter, FilterConfig, FilterRun, StepDiagnostics};
pub use learn::{compute_twist_targets, fit_quadratic_twist, learn_psi, RegConfig, TwistFit};
pub use model::{ModelSpec, Observation, ObservationModel};
pub use particle::{ess, normalize_log_weights, ParticleSystem, ResamplingScheme};
pub use stream::StreamKey;
pub use twist::TwistParams;
