//! Particle systems, log-weight arithmetic, ESS, resampling, and lineage
//! storage for path reconstruction.

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::error::{Result, SmcError, StepPhase};

/// `N` weighted particles at one time step.
///
/// `log_weights` are kept self-normalised (`logsumexp == 0` up to rounding)
/// and `log_z` accumulates both weight updates of every filter step, so it
/// estimates the log normalising constant `log p(y_{1:t})`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSystem {
    /// Time index; 0 is the pre-data convention below.
    pub t: usize,
    /// Particle positions; empty at `t == 0` (they are never used).
    pub positions: Vec<DVector<f64>>,
    /// Self-normalised log weights.
    pub log_weights: Vec<f64>,
    /// Ancestor index of each particle in the previous system (0-based);
    /// identity after a step that did not resample.
    pub ancestors: Vec<usize>,
    /// Running log normalising-constant estimate.
    pub log_z: f64,
}

impl ParticleSystem {
    /// The time-0 convention: uniform weights, `Z = 1`, no positions.
    pub fn initial(n: usize) -> Self {
        assert!(n >= 1, "need at least one particle");
        Self {
            t: 0,
            positions: Vec::new(),
            log_weights: vec![-(n as f64).ln(); n],
            ancestors: (0..n).collect(),
            log_z: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn ess(&self) -> f64 {
        ess(&self.log_weights)
    }

    /// Weighted mean of the positions.
    pub fn weighted_mean(&self) -> DVector<f64> {
        let d = self.positions[0].len();
        let mut mean = DVector::zeros(d);
        for (x, &lw) in self.positions.iter().zip(&self.log_weights) {
            mean += x * lw.exp();
        }
        mean
    }

    /// Weighted covariance of the positions.
    pub fn weighted_cov(&self) -> DMatrix<f64> {
        let d = self.positions[0].len();
        let mean = self.weighted_mean();
        let mut cov = DMatrix::zeros(d, d);
        for (x, &lw) in self.positions.iter().zip(&self.log_weights) {
            let c = x - &mean;
            cov += lw.exp() * &c * c.transpose();
        }
        cov
    }
}

/// Max-shifted `logsumexp`; `-inf` iff every entry is `-inf`.
pub fn log_sum_exp(log_values: &[f64]) -> f64 {
    let max = log_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = log_values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Self-normalises log weights in place and returns `logsumexp` of the
/// input. Errors if every entry is `-inf` (zero likelihood everywhere).
pub fn normalize_log_weights(log_weights: &mut [f64], t: usize, phase: StepPhase) -> Result<f64> {
    let log_sum = log_sum_exp(log_weights);
    if log_sum == f64::NEG_INFINITY {
        return Err(SmcError::DegenerateWeights { t, phase });
    }
    for lw in log_weights.iter_mut() {
        *lw -= log_sum;
    }
    Ok(log_sum)
}

/// Effective sample size `1 / sum_n W_n^2` of self-normalised log weights.
pub fn ess(log_weights: &[f64]) -> f64 {
    1.0 / log_weights.iter().map(|&lw| (2.0 * lw).exp()).sum::<f64>()
}

/// Resampling schemes. Residual-multinomial is the default used by the
/// filters; the others exist for the unbiasedness test suite and
/// configuration experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResamplingScheme {
    ResidualMultinomial,
    Multinomial,
    Systematic,
}

/// Draws `N` ancestor indices from normalised weights.
pub fn resample<R: Rng + ?Sized>(
    scheme: ResamplingScheme,
    weights: &[f64],
    rng: &mut R,
) -> Vec<usize> {
    match scheme {
        ResamplingScheme::ResidualMultinomial => residual_multinomial_resample(weights, rng),
        ResamplingScheme::Multinomial => multinomial_resample(weights, rng),
        ResamplingScheme::Systematic => systematic_resample(weights, rng),
    }
}

/// Residual-multinomial resampling.
///
/// Index `n` appears at least `floor(N w_n)` times; the `R` remaining slots
/// are i.i.d. multinomial draws with probabilities proportional to the
/// residuals `N w_n - floor(N w_n)`. Output order is deterministic copies
/// grouped ascending by index, followed by the residual draws.
pub fn residual_multinomial_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let mut ancestors = Vec::with_capacity(n);
    let mut residuals = vec![0.0; n];
    for (i, &w) in weights.iter().enumerate() {
        let scaled = n as f64 * w;
        let copies = scaled.floor() as usize;
        for _ in 0..copies {
            ancestors.push(i);
        }
        residuals[i] = scaled - scaled.floor();
    }
    let remaining = n - ancestors.len();
    if remaining > 0 {
        if residuals.iter().sum::<f64>() > 0.0 {
            let dist = WeightedIndex::new(&residuals).expect("nonnegative residuals");
            for _ in 0..remaining {
                ancestors.push(dist.sample(rng));
            }
        } else {
            // Rounding left no residual mass; fall back to the full weights.
            let dist = WeightedIndex::new(weights).expect("normalised weights");
            for _ in 0..remaining {
                ancestors.push(dist.sample(rng));
            }
        }
    }
    ancestors
}

/// Plain multinomial resampling: `N` i.i.d. draws.
pub fn multinomial_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let dist = WeightedIndex::new(weights).expect("normalised weights");
    (0..weights.len()).map(|_| dist.sample(rng)).collect()
}

/// Systematic resampling with a single uniform offset.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let u0: f64 = rng.gen::<f64>() / n as f64;
    let mut ancestors = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut i = 0;
    for k in 0..n {
        let u = u0 + k as f64 / n as f64;
        while u > cumulative && i + 1 < n {
            i += 1;
            cumulative += weights[i];
        }
        ancestors.push(i);
    }
    ancestors
}

/// Positions and ancestor arrays over a contiguous stretch of time steps,
/// for genealogy tracing.
#[derive(Clone, Debug, Default)]
pub struct LineageBuffer {
    /// Time index of the first retained step.
    pub start_time: usize,
    /// Positions per retained step, oldest first.
    pub positions: Vec<Vec<DVector<f64>>>,
    /// Ancestor arrays per retained step; `ancestors[k][n]` indexes into
    /// step `k - 1` of the buffer.
    pub ancestors: Vec<Vec<usize>>,
}

impl LineageBuffer {
    /// Snapshots a contiguous run of systems. Panics if the time indices
    /// have a gap.
    pub fn from_systems<'a>(systems: impl IntoIterator<Item = &'a ParticleSystem>) -> Self {
        let mut buf = LineageBuffer::default();
        for sys in systems {
            if buf.positions.is_empty() {
                buf.start_time = sys.t;
            } else {
                let expected = buf.start_time + buf.positions.len();
                assert_eq!(sys.t, expected, "gap in lineage buffer at time {expected}");
            }
            buf.positions.push(sys.positions.clone());
            buf.ancestors.push(sys.ancestors.clone());
        }
        buf
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Traces every particle's ancestral path over the buffer.
///
/// Path `n` at the final time is particle `n` of `final_system`; earlier
/// entries follow the ancestor chain. Path weights are the final system's
/// log weights.
pub fn reconstruct_paths(
    buffer: &LineageBuffer,
    final_system: &ParticleSystem,
) -> Vec<Vec<DVector<f64>>> {
    let steps = buffer.len();
    assert!(steps > 0, "empty lineage buffer");
    assert_eq!(
        buffer.start_time + steps - 1,
        final_system.t,
        "buffer does not end at the final system"
    );
    let n = final_system.len();
    let mut paths = vec![Vec::with_capacity(steps); n];
    for path_idx in 0..n {
        let mut idx = path_idx;
        let mut rev = Vec::with_capacity(steps);
        for k in (0..steps).rev() {
            rev.push(buffer.positions[k][idx].clone());
            idx = buffer.ancestors[k][idx];
        }
        rev.reverse();
        paths[path_idx] = rev;
    }
    paths
}
