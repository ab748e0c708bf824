//! The strongest single check of the twisted algebra: for a univariate
//! linear-Gaussian model the optimal twist sequence lies inside the
//! diagonal-quadratic class, and running the filter with it produces the
//! exact log normalising constant with zero variance across seeds.
//!
//! The optimal twists are derived here by an independent scalar backward
//! recursion (no shared code with the library's twist-integral path).

use nalgebra::{dmatrix, dvector};
use orcsmc::learn::learn_psi;
use orcsmc::model::{LinearGaussianObs, ModelSpec, Observation, ObservationModel};
use orcsmc::oracle::kalman_filter_smoother;
use orcsmc::{
    csmc, run_filter, CsmcConfig, FilterConfig, RegConfig, ResamplingScheme, StreamKey,
    TwistParams,
};

fn scalar_model(alpha: f64) -> ModelSpec {
    ModelSpec::new(
        dvector![0.0],
        dmatrix![1.0],
        dmatrix![alpha],
        dmatrix![1.0],
        ObservationModel::LinearGaussian(
            LinearGaussianObs::new(dmatrix![1.0], dmatrix![1.0]).unwrap(),
        ),
    )
    .unwrap()
}

/// Scalar quadratic coefficients of `log g_t(y | x)` for C, D scalars.
fn obs_quadratic(y: f64, c: f64, d: f64) -> (f64, f64, f64) {
    (
        -c * c / (2.0 * d),
        y * c / d,
        -y * y / (2.0 * d) - 0.5 * (2.0 * core::f64::consts::PI * d).ln(),
    )
}

/// Scalar quadratic coefficients, in `x_prev`, of
/// `log integral N(x; A x_prev, B) exp(a x^2 + b x + c) dx`.
fn lookahead_quadratic(a: f64, b: f64, c: f64, alpha: f64, bvar: f64) -> (f64, f64, f64) {
    let lambda = 1.0 / bvar - 2.0 * a;
    (
        alpha * alpha * a / (lambda * bvar),
        alpha * b / (lambda * bvar),
        c - 0.5 * (lambda * bvar).ln() + b * b / (2.0 * lambda),
    )
}

/// Optimal twist sequence by backward recursion:
/// `psi_T = g_T`, `psi_t = g_t * lookahead(psi_{t+1})`.
fn exact_twists(ys: &[Observation], alpha: f64, bvar: f64, c: f64, d: f64) -> Vec<TwistParams> {
    let horizon = ys.len();
    let mut coeffs = vec![(0.0, 0.0, 0.0); horizon];
    for t in (0..horizon).rev() {
        let (ga, gb, gc) = obs_quadratic(ys[t].y[0], c, d);
        coeffs[t] = if t + 1 == horizon {
            (ga, gb, gc)
        } else {
            let (na, nb, nc) = coeffs[t + 1];
            let (la, lb, lc) = lookahead_quadratic(na, nb, nc, alpha, bvar);
            (ga + la, gb + lb, gc + lc)
        };
    }
    coeffs
        .into_iter()
        .map(|(a, b, c)| TwistParams::new(dvector![a], dvector![b], c))
        .collect()
}

#[test]
fn exact_twists_give_zero_variance_log_z() {
    let alpha = 0.415;
    let model = scalar_model(alpha);
    let (_, ys) = model.simulate(10, &mut StreamKey::new(2024).step_rng(0));
    let truth = kalman_filter_smoother(&model, &ys).unwrap().log_z;
    let twists = exact_twists(&ys, alpha, 1.0, 1.0, 1.0);
    let cfg = FilterConfig::new(200);
    for seed in 0..10 {
        let run = run_filter(&model, &twists, &ys, &cfg, StreamKey::new(seed), false).unwrap();
        assert!(
            (run.log_z() - truth).abs() < 1e-6,
            "seed {seed}: {} vs {truth}",
            run.log_z()
        );
    }
}

#[test]
fn csmc_recovers_the_optimal_twists_and_log_z() {
    let alpha = 0.415;
    let model = scalar_model(alpha);
    let (_, ys) = model.simulate(10, &mut StreamKey::new(7).step_rng(0));
    let truth = kalman_filter_smoother(&model, &ys).unwrap().log_z;
    let mut cfg = CsmcConfig::new(200, 3);
    cfg.reg = RegConfig::exact();
    for seed in 0..5 {
        let run = csmc(&model, &ys, &cfg, StreamKey::new(100 + seed)).unwrap();
        assert!(
            (run.log_z() - truth).abs() < 1e-6,
            "seed {seed}: {} vs {truth}",
            run.log_z()
        );
        // The learned twists match the backward-recursion oracle.
        let oracle = exact_twists(&ys, alpha, 1.0, 1.0, 1.0);
        for (learned, exact) in run.twists.iter().zip(&oracle) {
            assert!((learned.a[0] - exact.a[0]).abs() < 1e-8);
            assert!((learned.b[0] - exact.b[0]).abs() < 1e-8);
            assert!((learned.c - exact.c).abs() < 1e-7);
        }
    }
}

#[test]
fn second_backward_sweep_is_idempotent() {
    // Once the fit is exact, relearning from a fresh forward pass must
    // reproduce the same coefficients.
    let model = scalar_model(0.415);
    let (_, ys) = model.simulate(8, &mut StreamKey::new(11).step_rng(0));
    let mut cfg = CsmcConfig::new(200, 3);
    cfg.reg = RegConfig::exact();
    let run = csmc(&model, &ys, &cfg, StreamKey::new(3)).unwrap();
    let history = run.run.history.as_ref().unwrap();
    let horizon = ys.len();
    let mut relearned = run.twists.clone();
    for t in (1..=horizon).rev() {
        let psi_next = if t == horizon {
            TwistParams::unit(1)
        } else {
            relearned[t].clone()
        };
        let fit = learn_psi(&model, &psi_next, &history[t - 1], &ys[t - 1], &cfg.reg).unwrap();
        relearned[t - 1] = fit.params;
    }
    for (before, after) in run.twists.iter().zip(&relearned) {
        assert!((before.a[0] - after.a[0]).abs() < 1e-8);
        assert!((before.b[0] - after.b[0]).abs() < 1e-8);
        assert!((before.c - after.c).abs() < 1e-8);
    }
}

#[test]
fn tiny_filter_log_z_unbiased_under_forced_multinomial() {
    // T = 2, N = 2, resampling every step: the mean of Z^N/Z over many
    // replicates sits within the Monte Carlo band around 1.
    let model = scalar_model(0.5);
    let (_, ys) = model.simulate(2, &mut StreamKey::new(40).step_rng(0));
    let truth = kalman_filter_smoother(&model, &ys).unwrap().log_z;
    let cfg = FilterConfig {
        n_particles: 2,
        kappa_ess: 1.0,
        resampling: ResamplingScheme::Multinomial,
    };
    let reps = 2000;
    let ratios: Vec<f64> = (0..reps)
        .map(|r| {
            let run = orcsmc::run_bpf(&model, &ys, &cfg, StreamKey::new(5000 + r), false).unwrap();
            (run.log_z() - truth).exp()
        })
        .collect();
    let mean = ratios.iter().sum::<f64>() / reps as f64;
    let var = ratios.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps - 1) as f64;
    let se = (var / reps as f64).sqrt();
    assert!((mean - 1.0).abs() < 4.0 * se, "mean {mean} se {se}");
}
