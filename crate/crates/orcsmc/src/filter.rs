//! The twisted auxiliary particle filter: one step of the two-part weight
//! update on the twisted model, and multi-step drivers. With unit twists
//! every short-circuit collapses and the step is exactly a bootstrap
//! particle filter step.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Result, StepPhase};
use crate::model::{ModelSpec, Observation};
use crate::particle::{
    ess, normalize_log_weights, resample, LineageBuffer, ParticleSystem, ResamplingScheme,
};
use crate::stream::StreamKey;
use crate::twist::{TwistParams, TwistedInitial, TwistedTransition};

/// Per-step record: both weight-update increments, the ESS the resampling
/// decision saw, and summaries cheap enough to always keep.
#[derive(Clone, Debug)]
pub struct StepDiagnostics {
    pub t: usize,
    /// ESS of the lookahead weights, before the resampling decision.
    pub ess_lookahead: f64,
    pub resampled: bool,
    /// ESS of the final weights.
    pub ess_final: f64,
    /// First (lookahead) normalising-constant increment.
    pub log_inc_lookahead: f64,
    /// Second (potential) normalising-constant increment.
    pub log_inc_potential: f64,
    /// Running log normalising-constant after the step.
    pub log_z: f64,
    /// Weighted mean of the first state coordinate.
    pub filter_mean_first: f64,
}

enum StepKernel {
    Initial(TwistedInitial),
    Transition(TwistedTransition),
}

/// One filter step at time `prev.t + 1`, in log domain:
///
/// 1. lookahead weights `log v_n = log W_n + log f(psi)(X_n)` (the scalar
///    `log mu(psi)` at time 1);
/// 2. bank `logsumexp(log v)` into `log Z`, self-normalise;
/// 3. resample (resetting to uniform) only if the ESS dropped below
///    `kappa_ess * N`, else keep identity ancestors;
/// 4. propagate each particle from its ancestor through the twisted kernel;
/// 5. potential weights `log w_n = log V_n + log g(y|X_n) - log psi(X_n)`;
/// 6. bank `logsumexp(log w)`, self-normalise.
///
/// The normalising-constant bank happens before any weight reset, so the
/// accumulated `log_z` does not depend on whether resampling triggered.
pub fn psi_apf_step<R: Rng + ?Sized>(
    model: &ModelSpec,
    psi: &TwistParams,
    prev: &ParticleSystem,
    y: &Observation,
    kappa_ess: f64,
    scheme: ResamplingScheme,
    rng: &mut R,
) -> Result<(ParticleSystem, StepDiagnostics)> {
    let n = prev.len();
    let t = prev.t + 1;
    assert_eq!(y.t, t, "observation time does not match the step");
    assert!(kappa_ess >= 0.0 && kappa_ess <= 1.0, "kappa_ess in [0, 1]");

    let kernel;
    let mut log_v: Vec<f64>;
    if t == 1 {
        let init = TwistedInitial::new(model, psi)?;
        let li = init.log_integral();
        log_v = prev.log_weights.iter().map(|&lw| lw + li).collect();
        kernel = StepKernel::Initial(init);
    } else {
        assert_eq!(prev.positions.len(), n, "previous system has no positions");
        let trans = TwistedTransition::new(model, psi)?;
        log_v = prev
            .positions
            .iter()
            .zip(&prev.log_weights)
            .map(|(x, &lw)| lw + trans.log_integral(x))
            .collect();
        kernel = StepKernel::Transition(trans);
    }

    let log_inc_lookahead = normalize_log_weights(&mut log_v, t, StepPhase::Lookahead)?;
    let mut log_z = prev.log_z + log_inc_lookahead;

    let ess_lookahead = ess(&log_v);
    let resampled = ess_lookahead < kappa_ess * n as f64;
    let ancestors: Vec<usize> = if resampled {
        let weights: Vec<f64> = log_v.iter().map(|&lw| lw.exp()).collect();
        let ancestors = resample(scheme, &weights, rng);
        log_v = vec![-(n as f64).ln(); n];
        ancestors
    } else {
        (0..n).collect()
    };

    let positions: Vec<DVector<f64>> = ancestors
        .iter()
        .map(|&a| match &kernel {
            StepKernel::Initial(init) => init.sample(rng),
            StepKernel::Transition(trans) => trans.sample(&prev.positions[a], rng),
        })
        .collect();

    let mut log_w: Vec<f64> = positions
        .iter()
        .zip(&log_v)
        .map(|(x, &lv)| lv + model.log_obs_density(y, x) - psi.log_eval(x))
        .collect();
    let log_inc_potential = normalize_log_weights(&mut log_w, t, StepPhase::Potential)?;
    log_z += log_inc_potential;

    let ess_final = ess(&log_w);
    let filter_mean_first = positions
        .iter()
        .zip(&log_w)
        .map(|(x, &lw)| x[0] * lw.exp())
        .sum();

    let system = ParticleSystem {
        t,
        positions,
        log_weights: log_w,
        ancestors,
        log_z,
    };
    let diagnostics = StepDiagnostics {
        t,
        ess_lookahead,
        resampled,
        ess_final,
        log_inc_lookahead,
        log_inc_potential,
        log_z,
        filter_mean_first,
    };
    Ok((system, diagnostics))
}

/// Driver configuration shared by all filter runs.
#[derive(Clone, Debug)]
pub struct FilterConfig {
    pub n_particles: usize,
    pub kappa_ess: f64,
    pub resampling: ResamplingScheme,
}

impl FilterConfig {
    pub fn new(n_particles: usize) -> Self {
        Self {
            n_particles,
            kappa_ess: 0.5,
            resampling: ResamplingScheme::ResidualMultinomial,
        }
    }
}

/// A completed filter run.
#[derive(Clone, Debug)]
pub struct FilterRun {
    pub final_system: ParticleSystem,
    /// All systems `1..=T` when the run was asked to retain them.
    pub history: Option<Vec<ParticleSystem>>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl FilterRun {
    pub fn log_z(&self) -> f64 {
        self.final_system.log_z
    }

    /// Lineage over the retained history, for path reconstruction.
    pub fn lineage(&self) -> Option<LineageBuffer> {
        self.history
            .as_ref()
            .map(|systems| LineageBuffer::from_systems(systems.iter()))
    }
}

/// Runs the twisted filter over `ys` with one twist per time step.
///
/// The step at time `t` draws from `key.step_rng(t)`. No lookahead factor
/// exists beyond the final time: the step at `T` simply performs the
/// potential update, which is the same as holding a unit twist at `T + 1`.
pub fn run_filter(
    model: &ModelSpec,
    twists: &[TwistParams],
    ys: &[Observation],
    cfg: &FilterConfig,
    key: StreamKey,
    retain_history: bool,
) -> Result<FilterRun> {
    assert!(!ys.is_empty(), "need at least one observation");
    assert_eq!(twists.len(), ys.len(), "one twist per observation");
    let mut prev = ParticleSystem::initial(cfg.n_particles);
    let mut history = retain_history.then(|| Vec::with_capacity(ys.len()));
    let mut diagnostics = Vec::with_capacity(ys.len());
    for (psi, y) in twists.iter().zip(ys) {
        let mut rng = key.step_rng(y.t);
        let (system, diag) = psi_apf_step(model, psi, &prev, y, cfg.kappa_ess, cfg.resampling, &mut rng)?;
        diagnostics.push(diag);
        if let Some(h) = history.as_mut() {
            h.push(system.clone());
        }
        prev = system;
    }
    Ok(FilterRun {
        final_system: prev,
        history,
        diagnostics,
    })
}

/// Bootstrap particle filter: the unit-twist special case of [`run_filter`].
pub fn run_bpf(
    model: &ModelSpec,
    ys: &[Observation],
    cfg: &FilterConfig,
    key: StreamKey,
    retain_history: bool,
) -> Result<FilterRun> {
    let twists = vec![TwistParams::unit(model.dim()); ys.len()];
    run_filter(model, &twists, ys, cfg, key, retain_history)
}
