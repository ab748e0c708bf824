//! The two controllers built on the twisted filter.
//!
//! [`csmc`] repeats K forward-filter / backward-learn sweeps over the whole
//! record (offline). [`WindowState::step`] is the online rolling-window
//! controller: a learning filter re-runs a lag-L window K times per
//! observation to refine the twists, and a separate estimation filter
//! re-runs the window with the latest twists to produce the outputs. Both
//! cost and memory per step are bounded in t.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SmcError};
use crate::filter::{psi_apf_step, run_filter, FilterConfig, FilterRun, StepDiagnostics};
use crate::learn::{learn_psi, RegConfig};
use crate::model::{ModelSpec, Observation};
use crate::particle::{reconstruct_paths, LineageBuffer, ParticleSystem, ResamplingScheme};
use crate::stream::{StreamKey, STREAM_ESTIMATION, STREAM_LEARNING};
use crate::twist::TwistParams;

/// Configuration of the offline controller.
#[derive(Clone, Debug)]
pub struct CsmcConfig {
    pub n_particles: usize,
    /// Number of forward/backward refinement sweeps, K.
    pub iterations: usize,
    pub kappa_ess: f64,
    pub resampling: ResamplingScheme,
    pub reg: RegConfig,
    /// With learning disabled the sweeps are K independent bootstrap runs.
    pub learning_enabled: bool,
}

impl CsmcConfig {
    pub fn new(n_particles: usize, iterations: usize) -> Self {
        Self {
            n_particles,
            iterations,
            kappa_ess: 0.5,
            resampling: ResamplingScheme::ResidualMultinomial,
            reg: RegConfig::default(),
            learning_enabled: true,
        }
    }

    fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            n_particles: self.n_particles,
            kappa_ess: self.kappa_ess,
            resampling: self.resampling,
        }
    }
}

/// Output of the offline controller: the last learned twists and the final
/// forward pass (with full history, so paths can be reconstructed).
#[derive(Clone, Debug)]
pub struct CsmcRun {
    pub twists: Vec<TwistParams>,
    pub run: FilterRun,
    /// Fits that fell back to the unit twist across all sweeps.
    pub degenerate_fits: usize,
}

impl CsmcRun {
    pub fn log_z(&self) -> f64 {
        self.run.log_z()
    }

    /// Particle paths over `1..=T` with the final weights.
    pub fn paths(&self) -> (Vec<Vec<DVector<f64>>>, &[f64]) {
        let buffer = self.run.lineage().expect("csmc retains history");
        let paths = reconstruct_paths(&buffer, &self.run.final_system);
        (paths, &self.run.final_system.log_weights)
    }
}

/// Offline controlled SMC: K repetitions of a forward twisted-filter pass
/// followed by a backward learning sweep. Forward pass `k` draws from
/// `key.child(k)`, so with learning disabled the sweeps are exactly K
/// independent bootstrap filter runs.
pub fn csmc(
    model: &ModelSpec,
    ys: &[Observation],
    cfg: &CsmcConfig,
    key: StreamKey,
) -> Result<CsmcRun> {
    assert!(!ys.is_empty(), "need at least one observation");
    assert!(cfg.iterations >= 1, "need at least one sweep");
    let horizon = ys.len();
    let mut twists = vec![TwistParams::unit(model.dim()); horizon];
    let mut degenerate_fits = 0;
    let mut last_run = None;
    for k in 1..=cfg.iterations {
        let wrap = |e: SmcError| SmcError::CsmcAborted {
            iteration: k,
            source: Box::new(e),
        };
        let run = run_filter(model, &twists, ys, &cfg.filter_config(), key.child(k as u64), true)
            .map_err(wrap)?;
        if cfg.learning_enabled {
            let history = run.history.as_ref().expect("history retained");
            for t in (1..=horizon).rev() {
                let psi_next = if t == horizon {
                    TwistParams::unit(model.dim())
                } else {
                    twists[t].clone()
                };
                let fit = learn_psi(model, &psi_next, &history[t - 1], &ys[t - 1], &cfg.reg)
                    .map_err(wrap)?;
                degenerate_fits += fit.degenerate as usize;
                twists[t - 1] = fit.params;
            }
        }
        last_run = Some(run);
    }
    Ok(CsmcRun {
        twists,
        run: last_run.expect("at least one sweep"),
        degenerate_fits,
    })
}

/// Which time steps the estimation filter must fully produce. With
/// `Selected`, other steps only maintain the window boundary; outputs at
/// the selected times are identical
/// to always-overwrite because every window step re-draws from the same
/// per-time stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OutputTimes {
    All,
    Selected(BTreeSet<usize>),
}

/// Configuration of the online rolling controller.
#[derive(Clone, Debug)]
pub struct OrcsmcConfig {
    pub n_particles: usize,
    /// Rolling-window lag L.
    pub lag: usize,
    /// Inner refinement iterations per observation, K.
    pub iterations: usize,
    pub kappa_ess: f64,
    pub resampling: ResamplingScheme,
    pub reg: RegConfig,
    pub learning_enabled: bool,
    /// Retain every estimation system instead of discarding behind the
    /// window; needed for full-path smoothing studies. Requires
    /// `OutputTimes::All`.
    pub keep_all: bool,
    pub output_times: OutputTimes,
}

impl OrcsmcConfig {
    pub fn new(n_particles: usize, lag: usize, iterations: usize) -> Self {
        Self {
            n_particles,
            lag,
            iterations,
            kappa_ess: 0.5,
            resampling: ResamplingScheme::ResidualMultinomial,
            reg: RegConfig::default(),
            learning_enabled: true,
            keep_all: false,
            output_times: OutputTimes::All,
        }
    }
}

/// Per-step operation counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepCost {
    /// Filter steps performed (learning extension + inner re-runs +
    /// estimation re-runs).
    pub apf_steps: usize,
    /// Backward learning calls.
    pub learn_calls: usize,
    /// Particle propagations, `N` per filter step: the cost unit for
    /// budget-matched comparisons.
    pub propagations: usize,
}

/// Cumulative operation counts over a run.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunCounters {
    pub apf_steps: usize,
    pub learn_calls: usize,
    pub propagations: usize,
}

impl RunCounters {
    fn absorb(&mut self, step: &StepCost) {
        self.apf_steps += step.apf_steps;
        self.learn_calls += step.learn_calls;
        self.propagations += step.propagations;
    }
}

/// One emitted record of the online controller.
#[derive(Clone, Debug)]
pub struct OnlineOutput {
    pub t: usize,
    /// Running log normalising-constant estimate from the estimation filter.
    pub log_z: f64,
    pub filter_mean: DVector<f64>,
    pub filter_cov: DMatrix<f64>,
    pub ess: f64,
    pub resampled: bool,
    pub cost: StepCost,
    /// Learning + estimation systems currently held (bounded by
    /// `2 (L + 1)` outside keep-all mode).
    pub retained_systems: usize,
    /// Twist fits this step that fell back to the unit twist.
    pub degenerate_fits: usize,
}

/// The rolling-window state: twists over the window, the learning and
/// estimation systems including their frozen boundaries, and counters.
#[derive(Clone, Debug)]
pub struct WindowState {
    cfg: OrcsmcConfig,
    state_dim: usize,
    learn_key: StreamKey,
    est_key: StreamKey,
    t: usize,
    /// Twists for times `twist_base..`.
    twists: VecDeque<TwistParams>,
    twist_base: usize,
    /// Window observations, oldest first.
    obs: VecDeque<Observation>,
    /// Learning systems for times `t0 - 1 ..= t`; the front is the frozen
    /// boundary and is never re-run.
    learn_systems: VecDeque<ParticleSystem>,
    /// Estimation systems, same layout.
    est_systems: VecDeque<ParticleSystem>,
    /// Estimation systems that left the window, oldest first (keep-all).
    est_history: Vec<ParticleSystem>,
    counters: RunCounters,
}

impl WindowState {
    pub fn new(model: &ModelSpec, cfg: OrcsmcConfig, key: StreamKey) -> Self {
        Self::with_keys(
            model,
            cfg,
            key.child(STREAM_LEARNING),
            key.child(STREAM_ESTIMATION),
        )
    }

    /// Explicitly keyed constructor, mainly for stream-independence
    /// harnesses; [`WindowState::new`] derives the two keys as children of
    /// one replicate key.
    pub fn with_keys(
        model: &ModelSpec,
        cfg: OrcsmcConfig,
        learn_key: StreamKey,
        est_key: StreamKey,
    ) -> Self {
        assert!(cfg.n_particles >= 1, "need at least one particle");
        assert!(cfg.lag >= 1, "lag must be at least 1");
        assert!(cfg.iterations >= 1, "need at least one inner iteration");
        assert!(
            cfg.kappa_ess > 0.0 && cfg.kappa_ess <= 1.0,
            "kappa_ess in (0, 1]"
        );
        assert!(
            !cfg.keep_all || cfg.output_times == OutputTimes::All,
            "keep_all requires producing every time step"
        );
        let n = cfg.n_particles;
        Self {
            cfg,
            state_dim: model.dim(),
            learn_key,
            est_key,
            t: 0,
            twists: VecDeque::new(),
            twist_base: 1,
            obs: VecDeque::new(),
            learn_systems: VecDeque::from([ParticleSystem::initial(n)]),
            est_systems: VecDeque::from([ParticleSystem::initial(n)]),
            est_history: Vec::new(),
            counters: RunCounters::default(),
        }
    }

    pub fn current_time(&self) -> usize {
        self.t
    }

    pub fn counters(&self) -> &RunCounters {
        &self.counters
    }

    /// Systems currently held by the two filters (excludes keep-all history).
    pub fn retained_systems(&self) -> usize {
        self.learn_systems.len() + self.est_systems.len()
    }

    /// The latest estimation system, once at least one step has run.
    pub fn estimation_system(&self) -> Option<&ParticleSystem> {
        self.est_systems.back().filter(|s| s.t > 0)
    }

    /// Estimation systems currently held, boundary first.
    pub fn estimation_window(&self) -> impl Iterator<Item = &ParticleSystem> {
        self.est_systems.iter()
    }

    /// Learning systems currently held, boundary first.
    pub fn learning_window(&self) -> impl Iterator<Item = &ParticleSystem> {
        self.learn_systems.iter()
    }

    /// Current window twists, oldest first.
    pub fn window_twists(&self) -> impl Iterator<Item = (usize, &TwistParams)> {
        self.twists
            .iter()
            .enumerate()
            .map(|(i, psi)| (self.twist_base + i, psi))
    }

    fn twist(&self, s: usize) -> &TwistParams {
        &self.twists[s - self.twist_base]
    }

    /// Processes the observation for time `self.current_time() + 1`.
    ///
    /// Returns the online output, or `None` when `output_times` skips this
    /// step (`force_output` overrides, for the final step of a run).
    pub fn step(
        &mut self,
        model: &ModelSpec,
        y: Observation,
        force_output: bool,
    ) -> Result<Option<OnlineOutput>> {
        let t = self.t + 1;
        assert_eq!(y.t, t, "observation for time {t} expected");
        model.validate_observation(&y)?;
        let n = self.cfg.n_particles;
        let lag = self.cfg.lag;
        let t0 = if t >= lag { t - lag + 1 } else { 1 };
        let mut cost = StepCost::default();
        let mut degenerate_fits = 0;

        // Slide the window: drop twists below t0 and systems below t0 - 1.
        while self.twist_base < t0 && !self.twists.is_empty() {
            self.twists.pop_front();
            self.twist_base += 1;
        }
        while self.learn_systems.front().map_or(false, |s| s.t + 1 < t0) {
            self.learn_systems.pop_front();
        }
        while self.est_systems.front().map_or(false, |s| s.t + 1 < t0) {
            let old = self.est_systems.pop_front().expect("non-empty");
            if self.cfg.keep_all {
                self.est_history.push(old);
            }
        }
        while self.obs.front().map_or(false, |o| o.t < t0) {
            self.obs.pop_front();
        }

        // Warm start: previous window twists stay, the new time starts unit.
        if self.twists.is_empty() {
            self.twist_base = t;
        }
        self.twists.push_back(TwistParams::unit(self.state_dim));
        self.obs.push_back(y);
        let obs_base = self.obs.front().expect("just pushed").t;

        // Advance the learning filter to time t with the unit twist.
        {
            let prev = self.learn_systems.back().expect("boundary present");
            let mut rng = self.learn_key.step_rng(t);
            let (sys, _) = psi_apf_step(
                model,
                self.twist(t),
                prev,
                &self.obs[t - obs_base],
                self.cfg.kappa_ess,
                self.cfg.resampling,
                &mut rng,
            )
            .map_err(|e| SmcError::OrcsmcInner { t, iteration: 0, source: Box::new(e) })?;
            self.learn_systems.push_back(sys);
            cost.apf_steps += 1;
            cost.propagations += n;
        }

        // Inner refinement: backward learning sweep, then forward re-run of
        // the learning filter from the frozen boundary.
        if self.cfg.learning_enabled {
            for k in 1..=self.cfg.iterations {
                let wrap = |e: SmcError| SmcError::OrcsmcInner {
                    t,
                    iteration: k,
                    source: Box::new(e),
                };
                let learn_base = self.learn_systems.front().expect("boundary").t;
                for s in (t0..=t).rev() {
                    let psi_next = if s == t {
                        TwistParams::unit(self.state_dim)
                    } else {
                        self.twist(s + 1).clone()
                    };
                    let fit = learn_psi(
                        model,
                        &psi_next,
                        &self.learn_systems[s - learn_base],
                        &self.obs[s - obs_base],
                        &self.cfg.reg,
                    )
                    .map_err(wrap)?;
                    degenerate_fits += fit.degenerate as usize;
                    self.twists[s - self.twist_base] = fit.params;
                    cost.learn_calls += 1;
                }
                let slice = self.learn_systems.make_contiguous();
                for s in t0..=t {
                    let idx = s - learn_base;
                    let (before, after) = slice.split_at_mut(idx);
                    let prev = &before[idx - 1];
                    let mut rng = self.learn_key.step_rng(s);
                    let (sys, _) = psi_apf_step(
                        model,
                        &self.twists[s - self.twist_base],
                        prev,
                        &self.obs[s - obs_base],
                        self.cfg.kappa_ess,
                        self.cfg.resampling,
                        &mut rng,
                    )
                    .map_err(wrap)?;
                    after[0] = sys;
                    cost.apf_steps += 1;
                    cost.propagations += n;
                }
            }
        }

        // Estimation filter over the window with the latest twists. In
        // selective mode, non-output steps only advance the boundary chain
        // (nothing at all before the window starts sliding).
        let produce = force_output
            || match &self.cfg.output_times {
                OutputTimes::All => true,
                OutputTimes::Selected(set) => set.contains(&t),
            };
        let est_range = if produce {
            Some(t0..=t)
        } else if t >= lag {
            Some(t0..=t0)
        } else {
            None
        };
        let mut last_diag: Option<StepDiagnostics> = None;
        if let Some(range) = est_range {
            let est_base = self.est_systems.front().expect("boundary").t;
            for s in range {
                let idx = s - est_base;
                let mut rng = self.est_key.step_rng(s);
                let prev = &self.est_systems[idx - 1];
                let (sys, diag) = psi_apf_step(
                    model,
                    &self.twists[s - self.twist_base],
                    prev,
                    &self.obs[s - obs_base],
                    self.cfg.kappa_ess,
                    self.cfg.resampling,
                    &mut rng,
                )
                .map_err(|e| SmcError::OrcsmcInner { t, iteration: 0, source: Box::new(e) })?;
                if idx < self.est_systems.len() {
                    self.est_systems[idx] = sys;
                } else {
                    debug_assert_eq!(idx, self.est_systems.len());
                    self.est_systems.push_back(sys);
                }
                last_diag = Some(diag);
                cost.apf_steps += 1;
                cost.propagations += n;
            }
        }

        self.counters.absorb(&cost);
        self.t = t;

        if !produce {
            return Ok(None);
        }
        let diag = last_diag.expect("estimation pass ran");
        let system = self.est_systems.back().expect("non-empty");
        Ok(Some(OnlineOutput {
            t,
            log_z: system.log_z,
            filter_mean: system.weighted_mean(),
            filter_cov: system.weighted_cov(),
            ess: system.ess(),
            resampled: diag.resampled,
            cost,
            retained_systems: self.retained_systems(),
            degenerate_fits,
        }))
    }

    fn paths_over<'a>(
        &'a self,
        systems: impl Iterator<Item = &'a ParticleSystem>,
    ) -> (Vec<Vec<DVector<f64>>>, &'a [f64]) {
        let buffer = LineageBuffer::from_systems(systems);
        let final_system = self.est_systems.back().expect("non-empty");
        let paths = reconstruct_paths(&buffer, final_system);
        (paths, &final_system.log_weights)
    }

    /// Smoothing paths over the current window, weighted by the latest
    /// estimation weights.
    pub fn window_paths(&self) -> (Vec<Vec<DVector<f64>>>, &[f64]) {
        self.paths_over(self.est_systems.iter().filter(|s| s.t >= 1))
    }

    /// Smoothing paths all the way back to time 1; requires keep-all mode
    /// (or a horizon short enough that nothing was discarded).
    pub fn full_paths(&self) -> (Vec<Vec<DVector<f64>>>, &[f64]) {
        self.paths_over(
            self.est_history
                .iter()
                .chain(self.est_systems.iter())
                .filter(|s| s.t >= 1),
        )
    }
}

/// Runs the online controller over a full record, collecting the emitted
/// outputs (the final step is always produced). For streaming consumption
/// drive [`WindowState::step`] directly.
pub fn run_orcsmc(
    model: &ModelSpec,
    ys: &[Observation],
    cfg: &OrcsmcConfig,
    key: StreamKey,
) -> Result<(WindowState, Vec<OnlineOutput>)> {
    assert!(!ys.is_empty(), "need at least one observation");
    let mut state = WindowState::new(model, cfg.clone(), key);
    let mut outputs = Vec::new();
    let t_last = ys.last().expect("non-empty").t;
    for y in ys {
        let force = y.t == t_last;
        if let Some(out) = state.step(model, y.clone(), force)? {
            outputs.push(out);
        }
    }
    Ok((state, outputs))
}
