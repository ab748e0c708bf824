//! The hidden Markov model family used throughout: Gaussian linear latent
//! dynamics `x_1 ~ N(m, Sigma)`, `x_t | x_{t-1} ~ N(A x_{t-1}, B)` with a
//! pluggable observation density, plus simulation.
//!
//! Transitions are hard-wired Gaussian-linear because the twisted-kernel
//! algebra in [`crate::twist`] relies on Gaussian conjugacy; observation
//! models are an extensible enum.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SmcError};

fn check_spd(mat: &DMatrix<f64>, name: &'static str) -> Result<Cholesky<f64, Dyn>> {
    let scale = mat.amax().max(1.0);
    for i in 0..mat.nrows() {
        for j in 0..i {
            if (mat[(i, j)] - mat[(j, i)]).abs() > 1e-10 * scale {
                return Err(SmcError::NotPositiveDefinite(name));
            }
        }
    }
    Cholesky::new(mat.clone()).ok_or(SmcError::NotPositiveDefinite(name))
}

fn log_det_from_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum()
}

/// Draws `z ~ N(0, I_d)`.
pub(crate) fn standard_normal_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Gaussian observation density `y | x ~ N(C x, D)`.
#[derive(Clone, Debug)]
pub struct LinearGaussianObs {
    c: DMatrix<f64>,
    d_cov: DMatrix<f64>,
    d_chol: Cholesky<f64, Dyn>,
    log_norm: f64, // -(d'/2) ln(2 pi) - (1/2) ln det D
}

impl LinearGaussianObs {
    pub fn new(c: DMatrix<f64>, d_cov: DMatrix<f64>) -> Result<Self> {
        if d_cov.nrows() != c.nrows() || d_cov.ncols() != c.nrows() {
            return Err(SmcError::DimensionMismatch {
                context: "observation covariance D",
                expected: c.nrows(),
                found: d_cov.nrows(),
            });
        }
        let d_chol = check_spd(&d_cov, "D")?;
        let log_norm = -0.5 * (c.nrows() as f64) * (2.0 * core::f64::consts::PI).ln()
            - 0.5 * log_det_from_chol(&d_chol);
        Ok(Self { c, d_cov, d_chol, log_norm })
    }

    pub fn obs_matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn obs_cov(&self) -> &DMatrix<f64> {
        &self.d_cov
    }

    fn log_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let resid = y - &self.c * x;
        let half_maha = 0.5 * resid.dot(&self.d_chol.solve(&resid));
        self.log_norm - half_maha
    }

    fn sample<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        &self.c * x + self.d_chol.l() * standard_normal_vector(self.c.nrows(), rng)
    }
}

/// Univariate stochastic volatility observation `y | x ~ N(0, beta^2 e^x)`.
#[derive(Clone, Debug)]
pub struct SvObs {
    beta: f64,
}

impl SvObs {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(SmcError::InvalidObservation(format!(
                "stochastic volatility scale beta must be positive, got {beta}"
            )));
        }
        Ok(Self { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    fn log_density(&self, y: f64, x: f64) -> f64 {
        let log_var = 2.0 * self.beta.ln() + x;
        -0.5 * (2.0 * core::f64::consts::PI).ln() - 0.5 * log_var
            - 0.5 * y * y * (-log_var).exp()
    }

    fn sample<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> f64 {
        let sd = self.beta * (0.5 * x).exp();
        let z: f64 = rng.sample(StandardNormal);
        sd * z
    }
}

/// Per-coordinate binomial counts with a logistic link:
/// `y_j | x ~ Bin(M, 1 / (1 + e^{-x_j}))`.
#[derive(Clone, Debug)]
pub struct BinomialObs {
    trials: u32,
    ln_fact: Vec<f64>, // ln k! for k = 0..=M
}

impl BinomialObs {
    pub fn new(trials: u32) -> Result<Self> {
        if trials == 0 {
            return Err(SmcError::InvalidObservation(
                "binomial trial count M must be at least 1".into(),
            ));
        }
        let mut ln_fact = Vec::with_capacity(trials as usize + 1);
        ln_fact.push(0.0);
        for k in 1..=trials as usize {
            ln_fact.push(ln_fact[k - 1] + (k as f64).ln());
        }
        Ok(Self { trials, ln_fact })
    }

    pub fn trials(&self) -> u32 {
        self.trials
    }

    fn ln_choose(&self, k: usize) -> f64 {
        self.ln_fact[self.trials as usize] - self.ln_fact[k] - self.ln_fact[self.trials as usize - k]
    }

    /// One coordinate's `ln Bin(y; M, kappa(x))`; the logistic link is
    /// folded in as `y ln kappa = -y softplus(-x)` for stability.
    fn log_pmf(&self, y: usize, x: f64) -> f64 {
        let m = self.trials as f64;
        self.ln_choose(y) - (y as f64) * softplus(-x) - (m - y as f64) * softplus(x)
    }

    fn sample_coord<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> u32 {
        let p = 1.0 / (1.0 + (-x).exp());
        let mut count = 0;
        for _ in 0..self.trials {
            if rng.gen::<f64>() < p {
                count += 1;
            }
        }
        count
    }
}

/// The observation-density variant of a model.
#[derive(Clone, Debug)]
pub enum ObservationModel {
    LinearGaussian(LinearGaussianObs),
    StochasticVolatility(SvObs),
    BinomialLogistic(BinomialObs),
}

impl ObservationModel {
    /// Dimension of one observation vector, given state dimension `d`.
    pub fn obs_dim(&self, d: usize) -> usize {
        match self {
            ObservationModel::LinearGaussian(lg) => lg.c.nrows(),
            ObservationModel::StochasticVolatility(_) => 1,
            ObservationModel::BinomialLogistic(_) => d,
        }
    }
}

/// One observation `y_t`.
///
/// `y` is stored as a real vector for every variant; binomial counts are
/// integer-valued entries, validated by [`ModelSpec::validate_observation`].
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub t: usize,
    pub y: DVector<f64>,
}

impl Observation {
    pub fn new(t: usize, y: DVector<f64>) -> Self {
        Self { t, y }
    }
}

/// A homogeneous general-state-space HMM with Gaussian linear dynamics.
///
/// Immutable after construction; covariance factors are precomputed so
/// construction fails fast on non-positive-definite input.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    d: usize,
    m: DVector<f64>,
    sigma: DMatrix<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    obs: ObservationModel,
    sigma_chol: Cholesky<f64, Dyn>,
    b_chol: Cholesky<f64, Dyn>,
    sigma_inv: DMatrix<f64>,
    b_inv: DMatrix<f64>,
    log_det_sigma: f64,
    log_det_b: f64,
}

impl ModelSpec {
    pub fn new(
        m: DVector<f64>,
        sigma: DMatrix<f64>,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        obs: ObservationModel,
    ) -> Result<Self> {
        let d = m.len();
        for (mat, context) in [(&sigma, "Sigma"), (&a, "A"), (&b, "B")] {
            if mat.nrows() != d || mat.ncols() != d {
                return Err(SmcError::DimensionMismatch {
                    context,
                    expected: d,
                    found: mat.nrows(),
                });
            }
        }
        if let ObservationModel::LinearGaussian(lg) = &obs {
            if lg.c.ncols() != d {
                return Err(SmcError::DimensionMismatch {
                    context: "observation matrix C",
                    expected: d,
                    found: lg.c.ncols(),
                });
            }
        }
        if let ObservationModel::StochasticVolatility(_) = &obs {
            if d != 1 {
                return Err(SmcError::DimensionMismatch {
                    context: "stochastic volatility state",
                    expected: 1,
                    found: d,
                });
            }
        }
        let sigma_chol = check_spd(&sigma, "Sigma")?;
        let b_chol = check_spd(&b, "B")?;
        let sigma_inv = sigma_chol.inverse();
        let b_inv = b_chol.inverse();
        let log_det_sigma = log_det_from_chol(&sigma_chol);
        let log_det_b = log_det_from_chol(&b_chol);
        Ok(Self {
            d,
            m,
            sigma,
            a,
            b,
            obs,
            sigma_chol,
            b_chol,
            sigma_inv,
            b_inv,
            log_det_sigma,
            log_det_b,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn obs_dim(&self) -> usize {
        self.obs.obs_dim(self.d)
    }

    pub fn initial_mean(&self) -> &DVector<f64> {
        &self.m
    }

    pub fn initial_cov(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn transition_matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn transition_cov(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn obs(&self) -> &ObservationModel {
        &self.obs
    }

    pub(crate) fn initial_cov_inv(&self) -> &DMatrix<f64> {
        &self.sigma_inv
    }

    pub(crate) fn transition_cov_inv(&self) -> &DMatrix<f64> {
        &self.b_inv
    }

    pub(crate) fn initial_chol_l(&self) -> DMatrix<f64> {
        self.sigma_chol.l()
    }

    pub(crate) fn transition_chol_l(&self) -> DMatrix<f64> {
        self.b_chol.l()
    }

    pub(crate) fn log_det_initial_cov(&self) -> f64 {
        self.log_det_sigma
    }

    pub(crate) fn log_det_transition_cov(&self) -> f64 {
        self.log_det_b
    }

    /// Checks an observation against the active variant's support.
    pub fn validate_observation(&self, obs: &Observation) -> Result<()> {
        let expected = self.obs_dim();
        if obs.y.len() != expected {
            return Err(SmcError::DimensionMismatch {
                context: "observation",
                expected,
                found: obs.y.len(),
            });
        }
        if let ObservationModel::BinomialLogistic(bin) = &self.obs {
            for &v in obs.y.iter() {
                if v < 0.0 || v > bin.trials as f64 || v.fract() != 0.0 {
                    return Err(SmcError::InvalidObservation(format!(
                        "binomial count {v} outside 0..={}",
                        bin.trials
                    )));
                }
            }
        }
        Ok(())
    }

    /// `log g(y | x)` for the active variant. Never NaN; `-inf` can occur
    /// where the density underflows (extreme binomial/SV states).
    ///
    /// Dimension mismatches and out-of-support binomial counts are contract
    /// violations and panic; validate data once at ingestion instead.
    pub fn log_obs_density(&self, obs: &Observation, x: &DVector<f64>) -> f64 {
        assert_eq!(x.len(), self.d, "state dimension mismatch");
        assert_eq!(obs.y.len(), self.obs_dim(), "observation dimension mismatch");
        match &self.obs {
            ObservationModel::LinearGaussian(lg) => lg.log_density(&obs.y, x),
            ObservationModel::StochasticVolatility(sv) => sv.log_density(obs.y[0], x[0]),
            ObservationModel::BinomialLogistic(bin) => {
                let mut total = 0.0;
                for j in 0..self.d {
                    let y = obs.y[j];
                    assert!(
                        y >= 0.0 && y <= bin.trials as f64 && y.fract() == 0.0,
                        "binomial count {y} outside 0..={}",
                        bin.trials
                    );
                    total += bin.log_pmf(y as usize, x[j]);
                }
                total
            }
        }
    }

    /// Draws `x_1 ~ N(m, Sigma)`.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        &self.m + self.sigma_chol.l() * standard_normal_vector(self.d, rng)
    }

    /// Draws `x_t ~ N(A x_prev, B)`.
    pub fn sample_transition<R: Rng + ?Sized>(
        &self,
        x_prev: &DVector<f64>,
        rng: &mut R,
    ) -> DVector<f64> {
        assert_eq!(x_prev.len(), self.d, "state dimension mismatch");
        &self.a * x_prev + self.b_chol.l() * standard_normal_vector(self.d, rng)
    }

    /// Draws `y_t ~ g(. | x)`.
    pub fn sample_observation<R: Rng + ?Sized>(
        &self,
        t: usize,
        x: &DVector<f64>,
        rng: &mut R,
    ) -> Observation {
        let y = match &self.obs {
            ObservationModel::LinearGaussian(lg) => lg.sample(x, rng),
            ObservationModel::StochasticVolatility(sv) => {
                DVector::from_element(1, sv.sample(x[0], rng))
            }
            ObservationModel::BinomialLogistic(bin) => {
                DVector::from_fn(self.d, |j, _| bin.sample_coord(x[j], rng) as f64)
            }
        };
        Observation::new(t, y)
    }

    /// Simulates a latent trajectory and its observations for `t = 1..=horizon`.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        horizon: usize,
        rng: &mut R,
    ) -> (Vec<DVector<f64>>, Vec<Observation>) {
        assert!(horizon >= 1, "horizon must be at least 1");
        let mut xs = Vec::with_capacity(horizon);
        let mut ys = Vec::with_capacity(horizon);
        for t in 1..=horizon {
            let x = if t == 1 {
                self.sample_initial(rng)
            } else {
                self.sample_transition(&xs[t - 2], rng)
            };
            ys.push(self.sample_observation(t, &x, rng));
            xs.push(x);
        }
        (xs, ys)
    }
}
