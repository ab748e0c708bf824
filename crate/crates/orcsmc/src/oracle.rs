//! Exact and brute-force references the Monte Carlo machinery is tested
//! against: a Kalman filter with RTS smoothing for linear-Gaussian
//! observations, a dense-grid univariate filter for the other observation
//! models, tensor-grid quadrature for twisted integrals, and an exact
//! Wasserstein-1 distance between a weighted sample and a Gaussian.
//!
//! Everything here is deterministic given its inputs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SmcError};
use crate::model::{ModelSpec, Observation, ObservationModel};
use crate::twist::TwistParams;

const LN_2PI: f64 = 1.8378770664093453;

/// Kalman filter and RTS smoother output.
#[derive(Clone, Debug)]
pub struct KalmanResult {
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
    pub smoothed_means: Vec<DVector<f64>>,
    pub smoothed_covs: Vec<DMatrix<f64>>,
    /// Cumulative log-likelihood `log p(y_{1:t})` per time step.
    pub log_z_per_time: Vec<f64>,
    /// Final log-likelihood `log p(y_{1:T})`.
    pub log_z: f64,
}

/// Exact filtering, smoothing, and log-likelihood for a model with
/// linear-Gaussian observations.
pub fn kalman_filter_smoother(model: &ModelSpec, ys: &[Observation]) -> Result<KalmanResult> {
    let lg = match model.obs() {
        ObservationModel::LinearGaussian(lg) => lg,
        _ => return Err(SmcError::UnsupportedOracle("Kalman requires linear-Gaussian observations")),
    };
    assert!(!ys.is_empty(), "need at least one observation");
    let d = model.dim();
    let a = model.transition_matrix();
    let b = model.transition_cov();
    let c = lg.obs_matrix();
    let d_cov = lg.obs_cov();
    let dp = c.nrows() as f64;

    let horizon = ys.len();
    let mut predicted_means = Vec::with_capacity(horizon);
    let mut predicted_covs = Vec::with_capacity(horizon);
    let mut filtered_means = Vec::with_capacity(horizon);
    let mut filtered_covs = Vec::with_capacity(horizon);
    let mut log_z_per_time = Vec::with_capacity(horizon);
    let mut log_z = 0.0;

    for (idx, obs) in ys.iter().enumerate() {
        model.validate_observation(obs)?;
        let (m_pred, p_pred) = if idx == 0 {
            (model.initial_mean().clone(), model.initial_cov().clone())
        } else {
            let m_prev: &DVector<f64> = &filtered_means[idx - 1];
            let p_prev: &DMatrix<f64> = &filtered_covs[idx - 1];
            (a * m_prev, a * p_prev * a.transpose() + b)
        };
        let s = c * &p_pred * c.transpose() + d_cov;
        let s_chol = nalgebra::Cholesky::new(s.clone())
            .ok_or(SmcError::NotPositiveDefinite("innovation covariance"))?;
        let innov = &obs.y - c * &m_pred;
        let log_det_s: f64 = s_chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        log_z += -0.5 * dp * LN_2PI - 0.5 * log_det_s - 0.5 * innov.dot(&s_chol.solve(&innov));
        log_z_per_time.push(log_z);

        // Gain via the Cholesky solve of S against (C P_pred)'.
        let gain = (s_chol.solve(&(c * &p_pred))).transpose();
        let m_filt = &m_pred + &gain * &innov;
        // Joseph-form covariance update for symmetry.
        let ikc = DMatrix::identity(d, d) - &gain * c;
        let p_filt = &ikc * &p_pred * ikc.transpose() + &gain * d_cov * gain.transpose();

        predicted_means.push(m_pred);
        predicted_covs.push(p_pred);
        filtered_means.push(m_filt);
        filtered_covs.push(p_filt);
    }

    // RTS backward pass.
    let mut smoothed_means = filtered_means.clone();
    let mut smoothed_covs = filtered_covs.clone();
    for idx in (0..horizon - 1).rev() {
        let p_pred_next = &predicted_covs[idx + 1];
        let chol = nalgebra::Cholesky::new(p_pred_next.clone())
            .ok_or(SmcError::NotPositiveDefinite("predicted covariance"))?;
        // G = P_filt A' (P_pred_next)^{-1}, computed as solve then transpose.
        let gain = chol.solve(&(a * &filtered_covs[idx])).transpose();
        smoothed_means[idx] =
            &filtered_means[idx] + &gain * (&smoothed_means[idx + 1] - &predicted_means[idx + 1]);
        smoothed_covs[idx] = &filtered_covs[idx]
            + &gain * (&smoothed_covs[idx + 1] - p_pred_next) * gain.transpose();
    }

    Ok(KalmanResult {
        filtered_means,
        filtered_covs,
        smoothed_means,
        smoothed_covs,
        log_z,
        log_z_per_time,
    })
}

/// A uniform 1D grid for the dense-grid filter and quadrature.
#[derive(Clone, Copy, Debug)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        assert!(hi > lo && n >= 3, "degenerate grid");
        Self { lo, hi, n }
    }

    /// Default grid for a univariate model: 10 standard deviations of the
    /// wider of the initial and stationary state distributions, 4001 nodes.
    pub fn for_model(model: &ModelSpec) -> Result<Self> {
        if model.dim() != 1 {
            return Err(SmcError::UnsupportedOracle("grid filter requires d = 1"));
        }
        let alpha = model.transition_matrix()[(0, 0)];
        let b = model.transition_cov()[(0, 0)];
        let sd_stationary = if alpha.abs() < 0.9999 {
            (b / (1.0 - alpha * alpha)).sqrt()
        } else {
            (b * 1e4).sqrt()
        };
        let sd0 = model.initial_cov()[(0, 0)].sqrt();
        let center = model.initial_mean()[0];
        let halfwidth = 10.0 * sd_stationary.max(sd0) + center.abs();
        Ok(Self::new(center - halfwidth, center + halfwidth, 4001))
    }

    fn nodes(&self) -> Vec<f64> {
        let h = (self.hi - self.lo) / (self.n - 1) as f64;
        (0..self.n).map(|i| self.lo + i as f64 * h).collect()
    }

    fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }
}

/// Output of the dense-grid univariate filter.
#[derive(Clone, Debug)]
pub struct GridFilterResult {
    pub grid: Vec<f64>,
    /// Per-time filtering densities on the grid, trapezoid-normalised.
    pub filtering: Vec<Vec<f64>>,
    /// Cumulative log-likelihood per time step.
    pub log_z_per_time: Vec<f64>,
    pub log_z: f64,
    /// `|log_z - log_z(half grid)|` from the built-in refinement check.
    pub refinement_gap: f64,
    /// Set when the Richardson error estimate exceeds 1e-5.
    pub coarse_grid_warning: bool,
}

fn grid_forward_pass(model: &ModelSpec, ys: &[Observation], spec: &GridSpec) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
    let nodes = spec.nodes();
    let h = spec.step();
    let n = nodes.len();
    let trapz_w = |i: usize| if i == 0 || i == n - 1 { 0.5 * h } else { h };

    let alpha = model.transition_matrix()[(0, 0)];
    let b = model.transition_cov()[(0, 0)];
    let kernel_norm = 1.0 / (2.0 * core::f64::consts::PI * b).sqrt();
    let inv_2b = 0.5 / b;
    // Beyond 40 transition sds the kernel underflows f64 anyway.
    let cutoff = 40.0 * b.sqrt();

    let m0 = model.initial_mean()[0];
    let s0 = model.initial_cov()[(0, 0)];
    let init_norm = 1.0 / (2.0 * core::f64::consts::PI * s0).sqrt();

    let log_g = |obs: &Observation, x: f64| {
        model.log_obs_density(obs, &DVector::from_element(1, x))
    };

    let mut filtering: Vec<Vec<f64>> = Vec::with_capacity(ys.len());
    let mut log_z_per_time = Vec::with_capacity(ys.len());
    let mut log_z = 0.0;

    for (idx, obs) in ys.iter().enumerate() {
        model.validate_observation(obs)?;
        let predictive: Vec<f64> = if idx == 0 {
            nodes
                .iter()
                .map(|&x| {
                    let dx = x - m0;
                    init_norm * (-dx * dx / (2.0 * s0)).exp()
                })
                .collect()
        } else {
            let prev = &filtering[idx - 1];
            let weighted_prev: Vec<f64> =
                (0..n).map(|j| prev[j] * trapz_w(j)).collect();
            let means: Vec<f64> = nodes.iter().map(|&x| alpha * x).collect();
            (0..n)
                .map(|i| {
                    let xi = nodes[i];
                    let mut acc = 0.0;
                    for j in 0..n {
                        let diff = xi - means[j];
                        if diff.abs() > cutoff {
                            continue;
                        }
                        acc += weighted_prev[j] * (-diff * diff * inv_2b).exp();
                    }
                    acc * kernel_norm
                })
                .collect()
        };
        let unnorm: Vec<f64> = (0..n)
            .map(|i| predictive[i] * log_g(obs, nodes[i]).exp())
            .collect();
        let increment: f64 = (0..n).map(|i| unnorm[i] * trapz_w(i)).sum();
        if !(increment > 0.0) {
            return Err(SmcError::UnsupportedOracle(
                "grid filter mass vanished; widen the grid",
            ));
        }
        log_z += increment.ln();
        log_z_per_time.push(log_z);
        filtering.push(unnorm.iter().map(|v| v / increment).collect());
    }
    Ok((nodes, filtering, log_z_per_time))
}

/// Discretised forward recursion for univariate models; ground truth for
/// the non-Gaussian observation variants.
///
/// Runs a half-resolution pass alongside the main one; for the trapezoid
/// rule the true discretisation error is about a third of the observed gap,
/// and `coarse_grid_warning` is set when that estimate exceeds 1e-5.
pub fn grid_filter(model: &ModelSpec, ys: &[Observation], spec: &GridSpec) -> Result<GridFilterResult> {
    if model.dim() != 1 {
        return Err(SmcError::UnsupportedOracle("grid filter requires d = 1"));
    }
    assert!(!ys.is_empty(), "need at least one observation");
    let (grid, filtering, log_z_per_time) = grid_forward_pass(model, ys, spec)?;
    let log_z = *log_z_per_time.last().unwrap();

    let coarse = GridSpec::new(spec.lo, spec.hi, (spec.n + 1) / 2);
    let (_, _, coarse_log_z) = grid_forward_pass(model, ys, &coarse)?;
    let refinement_gap = (log_z - coarse_log_z.last().unwrap()).abs();
    let coarse_grid_warning = refinement_gap / 3.0 > 1e-5;

    Ok(GridFilterResult {
        grid,
        filtering,
        log_z_per_time,
        log_z,
        refinement_gap,
        coarse_grid_warning,
    })
}

/// Trapezoid quadrature of `log integral N(x; mean, cov) psi(x) dx` on a
/// tensor grid; supports `d <= 2`. This is the independent oracle for the
/// closed forms in [`crate::twist`].
pub fn quadrature_log_twisted_integral(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    psi: &TwistParams,
    grid: &GridSpec,
) -> Result<f64> {
    let d = mean.len();
    if d > 2 {
        return Err(SmcError::UnsupportedOracle("quadrature supports d <= 2"));
    }
    if psi.dim() != d || cov.nrows() != d {
        return Err(SmcError::DimensionMismatch {
            context: "quadrature",
            expected: d,
            found: psi.dim(),
        });
    }
    let chol = nalgebra::Cholesky::new(cov.clone())
        .ok_or(SmcError::NotPositiveDefinite("quadrature covariance"))?;
    let inv = chol.inverse();
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let log_norm = -0.5 * d as f64 * LN_2PI - 0.5 * log_det;

    let nodes = grid.nodes();
    let h = grid.step();
    let ln_w = |i: usize| if i == 0 || i == grid.n - 1 { (0.5 * h).ln() } else { h.ln() };

    // Streaming max-shifted logsumexp.
    let mut running_max = f64::NEG_INFINITY;
    let mut scaled_sum = 0.0;
    let mut push = |v: f64| {
        if v == f64::NEG_INFINITY {
            return;
        }
        if v <= running_max {
            scaled_sum += (v - running_max).exp();
        } else {
            scaled_sum = scaled_sum * (running_max - v).exp() + 1.0;
            running_max = v;
        }
    };

    match d {
        1 => {
            let (i00, m0) = (inv[(0, 0)], mean[0]);
            let (a0, b0, c) = (psi.a[0], psi.b[0], psi.c);
            for (i, &x) in nodes.iter().enumerate() {
                let dx = x - m0;
                let log_f = log_norm - 0.5 * dx * dx * i00 + a0 * x * x + b0 * x + c;
                push(log_f + ln_w(i));
            }
        }
        2 => {
            let (i00, i01, i11) = (inv[(0, 0)], inv[(0, 1)], inv[(1, 1)]);
            let (m0, m1) = (mean[0], mean[1]);
            let (a0, a1) = (psi.a[0], psi.a[1]);
            let (b0, b1) = (psi.b[0], psi.b[1]);
            for (i, &x) in nodes.iter().enumerate() {
                let dx = x - m0;
                let row_part = log_norm - 0.5 * dx * dx * i00 + a0 * x * x + b0 * x + psi.c + ln_w(i);
                for (j, &y) in nodes.iter().enumerate() {
                    let dy = y - m1;
                    let log_f =
                        row_part - dx * dy * i01 - 0.5 * dy * dy * i11 + a1 * y * y + b1 * y;
                    push(log_f + ln_w(j));
                }
            }
        }
        _ => unreachable!(),
    }
    if running_max == f64::NEG_INFINITY {
        return Err(SmcError::UnsupportedOracle("quadrature mass vanished"));
    }
    Ok(running_max + scaled_sum.ln())
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / core::f64::consts::SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * core::f64::consts::PI).sqrt()
}

/// Antiderivative of the standard normal CDF: `I(z) = z Phi(z) + phi(z)`.
fn cdf_antiderivative(z: f64) -> f64 {
    z * normal_cdf(z) + normal_pdf(z)
}

/// Crossing point of `Phi(z) = level` inside `[lo, hi]` by bisection.
fn bisect_cdf_level(level: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo < 1e-14 * (1.0 + mid.abs()) {
            return mid;
        }
        if normal_cdf(mid) < level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact `integral |F_hat(x) - F(x)| dx` between the weighted empirical CDF
/// of `samples` and the `N(mean, sd^2)` CDF.
///
/// Between consecutive sorted sample points (and on the two tails) the
/// empirical CDF is constant, so each segment has a closed-form integral of
/// `|level - Phi|` via `I(z) = z Phi(z) + phi(z)`; segments where the sign
/// flips are split at the crossing found by bisection on `Phi`.
pub fn wasserstein1_to_gaussian(samples: &[f64], weights: &[f64], mean: f64, sd: f64) -> f64 {
    assert!(sd > 0.0, "reference sd must be positive");
    assert_eq!(samples.len(), weights.len());
    assert!(!samples.is_empty());
    let total: f64 = weights.iter().sum();
    assert!(
        (total - 1.0).abs() < 1e-6,
        "weights must be normalised, sum = {total}"
    );

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&i, &j| samples[i].partial_cmp(&samples[j]).unwrap());

    // z-coordinates of the sorted sample points and CDF level after each.
    let z_points: Vec<f64> = order.iter().map(|&i| (samples[i] - mean) / sd).collect();
    let mut levels = Vec::with_capacity(order.len());
    let mut acc = 0.0;
    for &i in &order {
        acc += weights[i] / total;
        levels.push(acc.min(1.0));
    }
    *levels.last_mut().unwrap() = 1.0;

    // Integral of |level - Phi| over [lo, hi] in z units, both finite.
    let segment = |level: f64, lo: f64, hi: f64| -> f64 {
        if hi <= lo {
            return 0.0;
        }
        let below = |l: f64, u: f64| level * (u - l) - (cdf_antiderivative(u) - cdf_antiderivative(l));
        let above = |l: f64, u: f64| (cdf_antiderivative(u) - cdf_antiderivative(l)) - level * (u - l);
        if normal_cdf(hi) <= level {
            below(lo, hi)
        } else if normal_cdf(lo) >= level {
            above(lo, hi)
        } else {
            let cross = bisect_cdf_level(level, lo, hi);
            below(lo, cross) + above(cross, hi)
        }
    };

    // Left tail: F_hat = 0, so the integrand is Phi, and I(-inf) = 0.
    let mut total_z = cdf_antiderivative(z_points[0]);
    for k in 0..z_points.len() - 1 {
        total_z += segment(levels[k], z_points[k], z_points[k + 1]);
    }
    // Right tail: integrand is 1 - Phi; its integral to +inf is I(z) - z.
    let z_last = *z_points.last().unwrap();
    total_z += cdf_antiderivative(z_last) - z_last;

    sd * total_z
}

/// Centers and scales samples by the reference moments; weights unchanged.
pub fn standardize_marginal(samples: &[f64], true_mean: f64, true_sd: f64) -> Vec<f64> {
    assert!(true_sd > 0.0, "reference sd must be positive");
    samples.iter().map(|&x| (x - true_mean) / true_sd).collect()
}
