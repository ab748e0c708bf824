//! Error type shared across the library.

use thiserror::Error;

/// Which of the two weight updates of a filter step degenerated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepPhase {
    /// The lookahead update `v^n = W^n f(psi)(X^n)`.
    Lookahead,
    /// The potential update `w^n = V^n g(y|X) / psi(X)`.
    Potential,
}

impl core::fmt::Display for StepPhase {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            StepPhase::Lookahead => write!(f, "lookahead weight update"),
            StepPhase::Potential => write!(f, "potential weight update"),
        }
    }
}

#[derive(Debug, Error)]
pub enum SmcError {
    #[error("matrix `{0}` is not symmetric positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("observation outside model support: {0}")]
    InvalidObservation(String),

    /// The twisted precision matrix lost positive definiteness. Learned
    /// twists are clipped before they reach a kernel, so this signals a
    /// hand-built twist that violates the integrability invariant.
    #[error("twist not integrable against the reference covariance")]
    TwistNotIntegrable,

    /// Every particle weight vanished; carries the time step and phase.
    #[error("all particle weights vanished at time {t} during the {phase}")]
    DegenerateWeights { t: usize, phase: StepPhase },

    #[error("csmc forward pass {iteration} aborted: {source}")]
    CsmcAborted {
        iteration: usize,
        #[source]
        source: Box<SmcError>,
    },

    #[error("orcsmc inner pass failed at time {t}, iteration {iteration}: {source}")]
    OrcsmcInner {
        t: usize,
        iteration: usize,
        #[source]
        source: Box<SmcError>,
    },

    #[error("oracle does not support this configuration: {0}")]
    UnsupportedOracle(&'static str),
}

pub type Result<T> = core::result::Result<T, SmcError>;
