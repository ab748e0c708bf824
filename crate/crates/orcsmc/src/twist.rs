//! Exponential-quadratic twisting functions and the Gaussian-conjugate
//! twisted-model quantities built from them.
//!
//! A twist is `psi(x) = exp(sum_j a_j x_j^2 + sum_j b_j x_j + c)` with a
//! diagonal quadratic part. Against the model's Gaussian transition
//! `N(A x_prev, B)` everything of interest is closed-form: with
//! `mu = A x_prev`, `Lambda = B^{-1} - 2 diag(a)` and `eta = B^{-1} mu + b`,
//!
//! ```text
//! log f(psi)(x_prev) = c - (1/2) logdet(Lambda B)
//!                        + (1/2) eta' Lambda^{-1} eta - (1/2) mu' B^{-1} mu
//! ```
//!
//! and the twisted transition is `N(Lambda^{-1} eta, Lambda^{-1})`. The
//! time-1 variants replace `(A x_prev, B)` by `(m, Sigma)`.
//!
//! All returns are in log domain; long horizons underflow otherwise.
//! [`TwistedTransition`] and [`TwistedInitial`] amortize the factorization
//! work across the particles of one step.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmcError};
use crate::model::ModelSpec;

mod dvector_serde {
    use super::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, ser: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(de)?))
    }
}

/// Parameters of one exponential-quadratic twisting function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwistParams {
    /// Diagonal of the quadratic coefficient matrix.
    #[serde(with = "dvector_serde")]
    pub a: DVector<f64>,
    /// Linear coefficients.
    #[serde(with = "dvector_serde")]
    pub b: DVector<f64>,
    /// Constant offset.
    pub c: f64,
}

impl TwistParams {
    pub fn new(a: DVector<f64>, b: DVector<f64>, c: f64) -> Self {
        assert_eq!(a.len(), b.len(), "twist coefficient lengths differ");
        Self { a, b, c }
    }

    /// The unit twist `psi == 1`.
    pub fn unit(d: usize) -> Self {
        Self {
            a: DVector::zeros(d),
            b: DVector::zeros(d),
            c: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn is_unit(&self) -> bool {
        self.c == 0.0 && self.a.iter().all(|&v| v == 0.0) && self.b.iter().all(|&v| v == 0.0)
    }

    /// `log psi(x)`, exactly `sum a_j x_j^2 + sum b_j x_j + c`.
    ///
    /// Returns exactly 0.0 for the unit twist so that unit-twist filter
    /// steps reduce to the bootstrap filter bit for bit.
    pub fn log_eval(&self, x: &DVector<f64>) -> f64 {
        assert_eq!(x.len(), self.dim(), "state dimension mismatch");
        if self.is_unit() {
            return 0.0;
        }
        let mut acc = self.c;
        for j in 0..x.len() {
            acc += self.a[j] * x[j] * x[j] + self.b[j] * x[j];
        }
        acc
    }

    /// Smallest eigenvalue of `ref_cov^{-1} - 2 diag(a)`, the twisted
    /// precision against a reference covariance. Positive means integrable.
    pub fn min_twisted_eigenvalue(&self, ref_cov_inv: &DMatrix<f64>) -> f64 {
        let mut lambda = ref_cov_inv.clone();
        for j in 0..self.dim() {
            lambda[(j, j)] -= 2.0 * self.a[j];
        }
        lambda.symmetric_eigen().eigenvalues.min()
    }
}

/// Shared machinery for the twisted initial kernel and twisted transition
/// kernel: the precision `Lambda`, its factor, and the log-determinant term.
#[derive(Clone, Debug)]
struct TwistedCore {
    lambda_chol: Cholesky<f64, nalgebra::Dyn>,
    // Upper factor L' kept separately for the sampling backsolve.
    lambda_chol_upper: DMatrix<f64>,
    // (1/2) [logdet(Lambda) + logdet(ref_cov)]
    half_log_det: f64,
}

impl TwistedCore {
    fn new(ref_cov_inv: &DMatrix<f64>, log_det_ref: f64, psi: &TwistParams) -> Result<Self> {
        let d = psi.dim();
        if ref_cov_inv.nrows() != d {
            return Err(SmcError::DimensionMismatch {
                context: "twist",
                expected: ref_cov_inv.nrows(),
                found: d,
            });
        }
        let mut lambda = ref_cov_inv.clone();
        for j in 0..d {
            lambda[(j, j)] -= 2.0 * psi.a[j];
        }
        let lambda_chol = Cholesky::new(lambda).ok_or(SmcError::TwistNotIntegrable)?;
        let log_det_lambda: f64 = lambda_chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        Ok(Self {
            lambda_chol_upper: lambda_chol.l().transpose(),
            half_log_det: 0.5 * (log_det_lambda + log_det_ref),
            lambda_chol,
        })
    }

    /// `c - (1/2) logdet(Lambda Bref) + (1/2) eta' Lambda^{-1} eta
    ///    - (1/2) mu' Bref^{-1} mu`, given `u = Bref^{-1} mu`.
    fn log_integral(&self, psi_c: f64, mu: &DVector<f64>, u: &DVector<f64>, eta: &DVector<f64>) -> f64 {
        let solved = self.lambda_chol.solve(eta);
        psi_c - self.half_log_det + 0.5 * eta.dot(&solved) - 0.5 * mu.dot(u)
    }

    /// Draws from `N(Lambda^{-1} eta, Lambda^{-1})`.
    fn sample<R: Rng + ?Sized>(&self, eta: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let d = eta.len();
        let z = crate::model::standard_normal_vector(d, rng);
        let mean = self.lambda_chol.solve(eta);
        let noise = self
            .lambda_chol_upper
            .solve_upper_triangular(&z)
            .expect("positive definite factor");
        mean + noise
    }
}

/// Per-(time step, twist) cache for the twisted transition kernel.
///
/// Build once per step; `Lambda`, its factorization, and the determinant
/// terms are particle-independent.
#[derive(Clone, Debug)]
pub struct TwistedTransition {
    unit: bool,
    a_mat: DMatrix<f64>,
    b_inv: DMatrix<f64>,
    base_chol_l: DMatrix<f64>,
    lin: DVector<f64>,
    offset: f64,
    core: Option<TwistedCore>,
}

impl TwistedTransition {
    pub fn new(model: &ModelSpec, psi: &TwistParams) -> Result<Self> {
        let unit = psi.is_unit();
        let core = if unit {
            None
        } else {
            Some(TwistedCore::new(
                model.transition_cov_inv(),
                model.log_det_transition_cov(),
                psi,
            )?)
        };
        Ok(Self {
            unit,
            a_mat: model.transition_matrix().clone(),
            b_inv: model.transition_cov_inv().clone(),
            base_chol_l: model.transition_chol_l(),
            lin: psi.b.clone(),
            offset: psi.c,
            core,
        })
    }

    /// `log f(psi)(x_prev)`; exactly 0 for the unit twist.
    pub fn log_integral(&self, x_prev: &DVector<f64>) -> f64 {
        if self.unit {
            return 0.0;
        }
        let mu = &self.a_mat * x_prev;
        let u = &self.b_inv * &mu;
        let eta = &u + &self.lin;
        self.core
            .as_ref()
            .expect("non-unit twist has a core")
            .log_integral(self.offset, &mu, &u, &eta)
    }

    /// Draws from the twisted transition `f^psi(. | x_prev)`; reduces to
    /// the model transition for the unit twist.
    pub fn sample<R: Rng + ?Sized>(&self, x_prev: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        if self.unit {
            return &self.a_mat * x_prev
                + &self.base_chol_l * crate::model::standard_normal_vector(x_prev.len(), rng);
        }
        let mu = &self.a_mat * x_prev;
        let eta = &self.b_inv * mu + &self.lin;
        self.core.as_ref().expect("non-unit twist has a core").sample(&eta, rng)
    }
}

/// Twisted initial kernel: the scalar `log mu(psi_1)` and draws from
/// `mu^psi`.
#[derive(Clone, Debug)]
pub struct TwistedInitial {
    unit: bool,
    mean: DVector<f64>,
    init_chol_l: DMatrix<f64>,
    log_integral: f64,
    eta: DVector<f64>,
    core: Option<TwistedCore>,
}

impl TwistedInitial {
    pub fn new(model: &ModelSpec, psi: &TwistParams) -> Result<Self> {
        if psi.is_unit() {
            return Ok(Self {
                unit: true,
                mean: model.initial_mean().clone(),
                init_chol_l: model.initial_chol_l(),
                log_integral: 0.0,
                eta: DVector::zeros(model.dim()),
                core: None,
            });
        }
        let core = TwistedCore::new(model.initial_cov_inv(), model.log_det_initial_cov(), psi)?;
        let m = model.initial_mean();
        let u = model.initial_cov_inv() * m;
        let eta = &u + &psi.b;
        let log_integral = core.log_integral(psi.c, m, &u, &eta);
        Ok(Self {
            unit: false,
            mean: m.clone(),
            init_chol_l: model.initial_chol_l(),
            log_integral,
            eta,
            core: Some(core),
        })
    }

    /// `log mu(psi_1)`; exactly 0 for the unit twist.
    pub fn log_integral(&self) -> f64 {
        self.log_integral
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        if self.unit {
            return &self.mean
                + &self.init_chol_l * crate::model::standard_normal_vector(self.mean.len(), rng);
        }
        self.core.as_ref().expect("non-unit twist has a core").sample(&self.eta, rng)
    }
}

/// One-shot `log f(psi)(x_prev)`; builds the kernel cache internally.
pub fn log_transition_integral(
    model: &ModelSpec,
    psi: &TwistParams,
    x_prev: &DVector<f64>,
) -> Result<f64> {
    Ok(TwistedTransition::new(model, psi)?.log_integral(x_prev))
}

/// One-shot `log mu(psi)`.
pub fn log_initial_integral(model: &ModelSpec, psi: &TwistParams) -> Result<f64> {
    Ok(TwistedInitial::new(model, psi)?.log_integral())
}

/// One-shot draw from `f^psi(. | x_prev)`.
pub fn sample_twisted_transition<R: Rng + ?Sized>(
    model: &ModelSpec,
    psi: &TwistParams,
    x_prev: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    Ok(TwistedTransition::new(model, psi)?.sample(x_prev, rng))
}

/// One-shot draw from `mu^psi`.
pub fn sample_twisted_initial<R: Rng + ?Sized>(
    model: &ModelSpec,
    psi: &TwistParams,
    rng: &mut R,
) -> Result<DVector<f64>> {
    Ok(TwistedInitial::new(model, psi)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinearGaussianObs, ObservationModel};
    use crate::oracle::{quadrature_log_twisted_integral, GridSpec};
    use crate::stream::StreamKey;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn model_1d(a: f64, b: f64) -> ModelSpec {
        ModelSpec::new(
            dvector![0.0],
            dmatrix![1.0],
            dmatrix![a],
            dmatrix![b],
            ObservationModel::LinearGaussian(
                LinearGaussianObs::new(dmatrix![1.0], dmatrix![1.0]).unwrap(),
            ),
        )
        .unwrap()
    }

    fn model_2d(b: DMatrix<f64>) -> ModelSpec {
        ModelSpec::new(
            dvector![0.0, 0.0],
            DMatrix::identity(2, 2),
            dmatrix![0.4, 0.1; -0.2, 0.5],
            b,
            ObservationModel::LinearGaussian(
                LinearGaussianObs::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap(),
            ),
        )
        .unwrap()
    }

    #[test]
    fn log_eval_examples() {
        let unit = TwistParams::unit(3);
        assert_eq!(unit.log_eval(&dvector![4.0, -2.0, 7.5]), 0.0);

        let psi = TwistParams::new(dvector![-0.5], dvector![0.0], 0.0);
        assert!((psi.log_eval(&dvector![2.0]) + 2.0).abs() < 1e-15);

        let psi = TwistParams::new(dvector![-1.0, -1.0], dvector![1.0, 0.0], 0.5);
        assert!((psi.log_eval(&dvector![1.0, 1.0]) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn unit_twist_integrals_are_exactly_zero() {
        let model = model_2d(dmatrix![1.0, 0.3; 0.3, 2.0]);
        let psi = TwistParams::unit(2);
        let v = log_transition_integral(&model, &psi, &dvector![3.0, -1.0]).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(log_initial_integral(&model, &psi).unwrap(), 0.0);
    }

    #[test]
    fn transition_integral_matches_analytic_1d() {
        // A = 1, B = 1, x_prev = 0, a = -1/2: integral = 1/sqrt(2).
        let model = model_1d(1.0, 1.0);
        let psi = TwistParams::new(dvector![-0.5], dvector![0.0], 0.0);
        let v = log_transition_integral(&model, &psi, &dvector![0.0]).unwrap();
        assert!((v - (-0.5 * 2.0f64.ln())).abs() < 1e-12, "{v}");
        let grid = GridSpec::new(-12.0, 12.0, 4001);
        let quad =
            quadrature_log_twisted_integral(&dvector![0.0], &dmatrix![1.0], &psi, &grid).unwrap();
        assert!((v - quad).abs() < 1e-8);
    }

    #[test]
    fn transition_integral_matches_quadrature_2d() {
        // Includes a non-diagonal B, beyond the factorized oracle check.
        let b = dmatrix![1.0, 0.4; 0.4, 0.8];
        let model = model_2d(b.clone());
        let psi = TwistParams::new(dvector![-0.3, 0.2], dvector![0.5, -0.4], 0.3);
        let x_prev = dvector![1.2, -0.7];
        let v = log_transition_integral(&model, &psi, &x_prev).unwrap();
        let mean = model.transition_matrix() * &x_prev;
        let grid = GridSpec::new(-12.0, 12.0, 4001);
        let quad = quadrature_log_twisted_integral(&mean, &b, &psi, &grid).unwrap();
        assert!(
            ((v - quad) / quad.abs().max(1.0)).abs() < 1e-6,
            "closed {v} quad {quad}"
        );
    }

    #[test]
    fn initial_integral_matches_quadrature() {
        let model = ModelSpec::new(
            dvector![0.4],
            dmatrix![1.7],
            dmatrix![0.9],
            dmatrix![1.0],
            ObservationModel::LinearGaussian(
                LinearGaussianObs::new(dmatrix![1.0], dmatrix![1.0]).unwrap(),
            ),
        )
        .unwrap();
        let psi = TwistParams::new(dvector![-0.2], dvector![0.3], -0.1);
        let v = log_initial_integral(&model, &psi).unwrap();
        let grid = GridSpec::new(-14.0, 14.0, 4001);
        let quad =
            quadrature_log_twisted_integral(&dvector![0.4], &dmatrix![1.7], &psi, &grid).unwrap();
        assert!((v - quad).abs() < 1e-8, "closed {v} quad {quad}");
    }

    fn sample_moments(model: &ModelSpec, psi: &TwistParams, x_prev: &DVector<f64>, n: usize) -> (f64, f64) {
        let kernel = TwistedTransition::new(model, psi).unwrap();
        let mut rng = StreamKey::new(101).step_rng(0);
        let draws: Vec<f64> = (0..n).map(|_| kernel.sample(x_prev, &mut rng)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        (mean, var)
    }

    #[test]
    fn twisted_sampling_matches_posterior_moments() {
        let model = model_1d(0.0, 1.0);
        let n = 100_000;

        // a = -1/2, b = 0: N(0, 1/2).
        let psi = TwistParams::new(dvector![-0.5], dvector![0.0], 0.0);
        let (mean, var) = sample_moments(&model, &psi, &dvector![0.0], n);
        let se_mean = (0.5f64 / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * se_mean, "mean {mean}");
        let se_var = 0.5 * (2.0f64 / n as f64).sqrt();
        assert!((var - 0.5).abs() < 4.0 * se_var, "var {var}");

        // a = 0, b = 1: N(1, 1).
        let psi = TwistParams::new(dvector![0.0], dvector![1.0], 0.0);
        let (mean, var) = sample_moments(&model, &psi, &dvector![0.0], n);
        let se_mean = (1.0f64 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 4.0 * se_mean, "mean {mean}");
        assert!((var - 1.0).abs() < 4.0 * (2.0f64 / n as f64).sqrt(), "var {var}");
    }

    #[test]
    fn unit_twist_sampling_reduces_to_transition() {
        let model = model_1d(0.7, 0.6);
        let psi = TwistParams::unit(1);
        let kernel = TwistedTransition::new(&model, &psi).unwrap();
        let x_prev = dvector![2.0];
        // Same stream must give bit-identical draws through both paths.
        let mut r1 = StreamKey::new(5).step_rng(1);
        let mut r2 = StreamKey::new(5).step_rng(1);
        for _ in 0..50 {
            assert_eq!(kernel.sample(&x_prev, &mut r1), model.sample_transition(&x_prev, &mut r2));
        }
    }

    #[test]
    fn non_integrable_twist_is_rejected() {
        let model = model_1d(0.5, 1.0);
        // a = 0.6 makes Lambda = 1 - 1.2 < 0.
        let psi = TwistParams::new(dvector![0.6], dvector![0.0], 0.0);
        assert!(matches!(
            TwistedTransition::new(&model, &psi),
            Err(SmcError::TwistNotIntegrable)
        ));
        assert!(psi.min_twisted_eigenvalue(model.transition_cov_inv()) < 0.0);
    }

    #[test]
    fn twist_params_serialize_roundtrip() {
        let psi = TwistParams::new(dvector![-0.25, -0.5], dvector![0.1, 0.2], 1.5);
        let json = serde_json::to_string(&psi).unwrap();
        assert!(json.contains("\"a\":[-0.25,-0.5]"), "{json}");
        let back: TwistParams = serde_json::from_str(&json).unwrap();
        assert_eq!(psi, back);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn closed_form_matches_quadrature_1d(
            a in -1.2f64..0.35,
            b in -1.5f64..1.5,
            c in -1.0f64..1.0,
            alpha in -0.9f64..0.9,
            bvar in 0.4f64..1.6,
            x_prev in -3.0f64..3.0,
        ) {
            let model = model_1d(alpha, bvar);
            let psi = TwistParams::new(dvector![a], dvector![b], c);
            // Keep the twisted kernel comfortably inside the grid.
            let lambda = 1.0 / bvar - 2.0 * a;
            prop_assume!(lambda > 0.5);
            let mu = alpha * x_prev;
            let twisted_mean = (mu / bvar + b) / lambda;
            prop_assume!(twisted_mean.abs() < 6.0);
            let v = log_transition_integral(&model, &psi, &dvector![x_prev]).unwrap();
            let grid = GridSpec::new(-12.0, 12.0, 4001);
            let quad = quadrature_log_twisted_integral(
                &dvector![mu], &dmatrix![bvar], &psi, &grid).unwrap();
            let rel = (v - quad).abs() / quad.abs().max(1.0);
            prop_assert!(rel < 1e-6, "closed {} quad {}", v, quad);
        }
    }

    #[test]
    fn twisted_sampling_consistency_2d() {
        // Empirical mean/cov of draws vs Lambda^{-1} eta and Lambda^{-1}.
        let b = dmatrix![1.0, 0.3; 0.3, 0.9];
        let model = model_2d(b.clone());
        let psi = TwistParams::new(dvector![-0.4, -0.1], dvector![0.3, -0.5], 0.0);
        let x_prev = dvector![0.8, -0.3];
        let kernel = TwistedTransition::new(&model, &psi).unwrap();

        let b_inv = b.clone().try_inverse().unwrap();
        let mut lambda = b_inv.clone();
        lambda[(0, 0)] += 0.8;
        lambda[(1, 1)] += 0.2;
        let mu = model.transition_matrix() * &x_prev;
        let eta = &b_inv * &mu + &psi.b;
        let lambda_inv = lambda.clone().try_inverse().unwrap();
        let want_mean = &lambda_inv * &eta;

        let n = 100_000;
        let mut rng = StreamKey::new(77).step_rng(0);
        let draws: Vec<DVector<f64>> = (0..n).map(|_| kernel.sample(&x_prev, &mut rng)).collect();
        let mean = draws.iter().sum::<DVector<f64>>() / n as f64;
        let mut cov = DMatrix::zeros(2, 2);
        for x in &draws {
            let cdev = x - &mean;
            cov += &cdev * cdev.transpose();
        }
        cov /= n as f64;
        for j in 0..2 {
            let se = (lambda_inv[(j, j)] / n as f64).sqrt();
            assert!((mean[j] - want_mean[j]).abs() < 4.0 * se, "mean[{j}]");
        }
        for i in 0..2 {
            for j in 0..2 {
                let se = ((lambda_inv[(i, i)] * lambda_inv[(j, j)]
                    + lambda_inv[(i, j)].powi(2))
                    / n as f64)
                    .sqrt();
                assert!(
                    (cov[(i, j)] - lambda_inv[(i, j)]).abs() < 4.0 * se,
                    "cov[{i},{j}] {} vs {}",
                    cov[(i, j)],
                    lambda_inv[(i, j)]
                );
            }
        }
    }
}
