//! Backward twist targets at particle locations and diagonal-quadratic
//! fits on the log scale.
//!
//! Targets are `log psi_t^n = log g_t(y_t | X_t^n) + log f_{t+1}(psi_{t+1})(X_t^n)`;
//! the fit regresses the negative log targets onto `[x^2, x, 1]` features
//! by ridge least squares, flips the sign back, and clips the quadratic
//! part so the twisted precision stays positive definite. The returned
//! twist replaces the previous one outright.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::model::{ModelSpec, Observation};
use crate::particle::ParticleSystem;
use crate::twist::{TwistParams, TwistedTransition};

/// Regression configuration: ridge strength (scale-relative), the relative
/// positive-definiteness floor used for clipping, and the minimum number of
/// finite rows (default `2d + 1`) below which the fit falls back to unit.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct RegConfig {
    pub ridge: f64,
    pub eps_pd_scale: f64,
    pub min_rows: Option<usize>,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-6,
            eps_pd_scale: 1e-4,
            min_rows: None,
        }
    }
}

impl RegConfig {
    /// Exact fits for tests and zero-variance setups: no ridge shrinkage.
    pub fn exact() -> Self {
        Self { ridge: 0.0, ..Self::default() }
    }
}

/// Per-particle regression targets; rows with `-inf` targets (zero
/// likelihood at the particle) are excluded from the fit.
#[derive(Clone, Debug)]
pub struct TwistTargets<'a> {
    pub points: &'a [DVector<f64>],
    pub log_targets: Vec<f64>,
}

/// Evaluates the backward targets at the system's particle positions.
/// Positions only; weights play no role.
pub fn compute_twist_targets<'a>(
    model: &ModelSpec,
    psi_next: &TwistParams,
    system: &'a ParticleSystem,
    y: &Observation,
) -> Result<TwistTargets<'a>> {
    assert_eq!(y.t, system.t, "observation time does not match the system");
    let lookahead = if psi_next.is_unit() {
        None
    } else {
        Some(TwistedTransition::new(model, psi_next)?)
    };
    let log_targets = system
        .positions
        .iter()
        .map(|x| {
            let g = model.log_obs_density(y, x);
            match &lookahead {
                None => g,
                Some(kernel) => g + kernel.log_integral(x),
            }
        })
        .collect();
    Ok(TwistTargets {
        points: &system.positions,
        log_targets,
    })
}

/// A fitted twist plus the degenerate-regression warning flag (set when
/// fewer than the minimum finite rows were available and the unit twist
/// was returned instead).
#[derive(Clone, Debug)]
pub struct TwistFit {
    pub params: TwistParams,
    pub degenerate: bool,
}

/// Upper bounds on the quadratic coefficients that keep
/// `ref_cov^{-1} - 2 diag(a)` at least `eps_pd`-positive definite.
fn clip_bounds(ref_cov: &DMatrix<f64>, eps_pd_scale: f64) -> Vec<f64> {
    let d = ref_cov.nrows();
    let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || ref_cov[(i, j)] == 0.0));
    if diagonal {
        let prec: Vec<f64> = (0..d).map(|j| 1.0 / ref_cov[(j, j)]).collect();
        let eps = eps_pd_scale * prec.iter().cloned().fold(f64::INFINITY, f64::min);
        prec.iter().map(|&p| 0.5 * (p - eps)).collect()
    } else {
        let inv = ref_cov
            .clone()
            .cholesky()
            .expect("reference covariance is positive definite")
            .inverse();
        let eps = eps_pd_scale * (0..d).map(|j| inv[(j, j)]).fold(f64::INFINITY, f64::min);
        let min_eig = inv.symmetric_eigen().eigenvalues.min();
        vec![0.5 * (min_eig - eps); d]
    }
}

/// Ridge least squares of the negative log targets on diagonal-quadratic
/// features, solved through an augmented SVD; the intercept is not
/// penalised. Coefficients are sign-flipped into twist parameters and the
/// quadratic part is clipped against `clip_ref` (the covariance the twist
/// must stay integrable against).
pub fn fit_quadratic_twist(
    targets: &TwistTargets<'_>,
    reg: &RegConfig,
    clip_ref: &DMatrix<f64>,
) -> TwistFit {
    let d = clip_ref.nrows();
    let rows: Vec<usize> = targets
        .log_targets
        .iter()
        .enumerate()
        .filter(|(_, &v)| v.is_finite())
        .map(|(i, _)| i)
        .collect();
    let min_rows = reg.min_rows.unwrap_or(2 * d + 1);
    if rows.len() < min_rows {
        return TwistFit {
            params: TwistParams::unit(d),
            degenerate: true,
        };
    }

    let p = 2 * d + 1;
    let n_aug = rows.len() + 2 * d;
    let mut design = DMatrix::zeros(n_aug, p);
    let mut response = DVector::zeros(n_aug);
    for (r, &i) in rows.iter().enumerate() {
        let x = &targets.points[i];
        for j in 0..d {
            design[(r, j)] = x[j] * x[j];
            design[(r, d + j)] = x[j];
        }
        design[(r, 2 * d)] = 1.0;
        response[r] = -targets.log_targets[i];
    }
    if reg.ridge > 0.0 {
        // Scale-relative penalty on the quadratic and linear columns.
        let mut trace = 0.0;
        for j in 0..2 * d {
            trace += design.column(j).norm_squared();
        }
        let lambda = (reg.ridge * trace / (2 * d) as f64).sqrt();
        for j in 0..2 * d {
            design[(rows.len() + j, j)] = lambda;
        }
    }

    let svd = design.svd(true, true);
    let beta = svd.solve(&response, 1e-12).expect("svd solve");

    let mut a = DVector::from_fn(d, |j, _| -beta[j]);
    let b = DVector::from_fn(d, |j, _| -beta[d + j]);
    let c = -beta[2 * d];

    for (j, bound) in clip_bounds(clip_ref, reg.eps_pd_scale).into_iter().enumerate() {
        if a[j] > bound {
            a[j] = bound;
        }
    }
    TwistFit {
        params: TwistParams::new(a, b, c),
        degenerate: false,
    }
}

/// One backward learning step: targets at the system's particles, then the
/// clipped quadratic fit. Time-1 twists clip against the initial
/// covariance, later ones against the transition covariance.
pub fn learn_psi(
    model: &ModelSpec,
    psi_next: &TwistParams,
    system: &ParticleSystem,
    y: &Observation,
    reg: &RegConfig,
) -> Result<TwistFit> {
    let targets = compute_twist_targets(model, psi_next, system, y)?;
    let clip_ref = if system.t == 1 {
        model.initial_cov()
    } else {
        model.transition_cov()
    };
    Ok(fit_quadratic_twist(&targets, reg, clip_ref))
}
