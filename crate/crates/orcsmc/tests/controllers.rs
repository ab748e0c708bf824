//! Structural and behavioural checks of the online rolling controller:
//! reductions, stream discipline, bounded cost and memory, window
//! consistency.

use std::collections::BTreeSet;

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use orcsmc::control::{OutputTimes, WindowState};
use orcsmc::model::{LinearGaussianObs, ModelSpec, ObservationModel, SvObs};
use orcsmc::stream::{STREAM_ESTIMATION, STREAM_LEARNING};
use orcsmc::{
    csmc, run_bpf, run_orcsmc, CsmcConfig, FilterConfig, OrcsmcConfig, StreamKey,
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

fn lg_model_2d() -> ModelSpec {
    ModelSpec::new(
        DVector::zeros(2),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2) * 0.415,
        DMatrix::identity(2, 2),
        ObservationModel::LinearGaussian(
            LinearGaussianObs::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap(),
        ),
    )
    .unwrap()
}

#[test]
fn learning_disabled_reduces_to_bpf_bitwise() {
    let model = lg_model_2d();
    let (_, ys) = model.simulate(20, &mut StreamKey::new(51).step_rng(0));
    let mut cfg = OrcsmcConfig::new(32, 4, 3);
    cfg.learning_enabled = false;
    let key = StreamKey::new(640);
    let (state, outputs) = run_orcsmc(&model, &ys, &cfg, key).unwrap();

    let fcfg = FilterConfig::new(32);
    let bpf = run_bpf(&model, &ys, &fcfg, key.child(STREAM_ESTIMATION), true).unwrap();
    assert_eq!(outputs.len(), ys.len());
    for (out, diag) in outputs.iter().zip(&bpf.diagnostics) {
        assert_eq!(out.log_z, diag.log_z, "t = {}", out.t);
        assert_eq!(out.resampled, diag.resampled);
    }
    assert_eq!(
        state.estimation_system().unwrap(),
        &bpf.final_system,
        "final systems must be identical"
    );
}

#[test]
fn csmc_learning_disabled_is_last_of_k_bootstrap_runs() {
    let model = scalar_model(0.7);
    let (_, ys) = model.simulate(12, &mut StreamKey::new(52).step_rng(0));
    let mut cfg = CsmcConfig::new(64, 3);
    cfg.learning_enabled = false;
    let key = StreamKey::new(88);
    let run = csmc(&model, &ys, &cfg, key).unwrap();
    let bpf = run_bpf(&model, &ys, &FilterConfig::new(64), key.child(3), false).unwrap();
    assert_eq!(run.log_z(), bpf.log_z());
}

#[test]
fn per_step_cost_is_bounded_and_exact() {
    let model = scalar_model(0.415);
    let (_, ys) = model.simulate(30, &mut StreamKey::new(53).step_rng(0));
    let (lag, k) = (4usize, 2usize);
    let cfg = OrcsmcConfig::new(8, lag, k);
    let (_, outputs) = run_orcsmc(&model, &ys, &cfg, StreamKey::new(1)).unwrap();
    for out in &outputs {
        let w = out.t.min(lag);
        assert_eq!(out.cost.apf_steps, 1 + (k + 1) * w, "t = {}", out.t);
        assert_eq!(out.cost.learn_calls, k * w, "t = {}", out.t);
        assert_eq!(out.cost.propagations, out.cost.apf_steps * 8);
        if out.t > lag {
            assert_eq!(
                out.cost.apf_steps + out.cost.learn_calls,
                (2 * k + 1) * lag + 1
            );
        }
        assert!(out.retained_systems <= 2 * (lag + 1));
    }
}

#[test]
fn window_boundary_is_frozen_across_a_step() {
    let model = scalar_model(0.415);
    let (_, ys) = model.simulate(15, &mut StreamKey::new(54).step_rng(0));
    let cfg = OrcsmcConfig::new(16, 3, 2);
    let key = StreamKey::new(9);
    let mut state = WindowState::new(&model, cfg, key);
    for y in &ys[..10] {
        state.step(&model, y.clone(), false).unwrap();
    }
    // Time 10, lag 3: next window is 9..=11 with boundary at 8.
    let est_before: Vec<_> = state.estimation_window().cloned().collect();
    let learn_before: Vec<_> = state.learning_window().cloned().collect();
    state.step(&model, ys[10].clone(), false).unwrap();
    let est_boundary = state.estimation_window().next().unwrap();
    let learn_boundary = state.learning_window().next().unwrap();
    assert_eq!(est_boundary.t, 8);
    assert_eq!(
        est_boundary,
        est_before.iter().find(|s| s.t == 8).unwrap(),
        "estimation boundary was mutated"
    );
    assert_eq!(
        learn_boundary,
        learn_before.iter().find(|s| s.t == 8).unwrap(),
        "learning boundary was mutated"
    );
}

#[test]
fn estimation_stream_is_independent_of_learning_seed() {
    let model = scalar_model(0.415);
    let (_, ys) = model.simulate(12, &mut StreamKey::new(55).step_rng(0));
    let mut cfg = OrcsmcConfig::new(24, 4, 2);
    cfg.learning_enabled = false; // freeze twists at unit
    let est_key = StreamKey::new(777).child(STREAM_ESTIMATION);
    let run_with_learn_seed = |learn_seed: u64| {
        let mut state = WindowState::with_keys(
            &model,
            cfg.clone(),
            StreamKey::new(learn_seed).child(STREAM_LEARNING),
            est_key,
        );
        let mut zs = Vec::new();
        for y in &ys {
            if let Some(out) = state.step(&model, y.clone(), false).unwrap() {
                zs.push(out.log_z);
            }
        }
        zs
    };
    assert_eq!(run_with_learn_seed(1), run_with_learn_seed(2));
}

#[test]
fn selective_outputs_match_always_overwrite() {
    let model = lg_model_2d();
    let (_, ys) = model.simulate(18, &mut StreamKey::new(56).step_rng(0));
    let key = StreamKey::new(31);
    let cfg_all = OrcsmcConfig::new(32, 4, 2);
    let (_, all_outputs) = run_orcsmc(&model, &ys, &cfg_all, key).unwrap();

    let wanted: BTreeSet<usize> = [5usize, 11, 18].into_iter().collect();
    let mut cfg_sel = cfg_all.clone();
    cfg_sel.output_times = OutputTimes::Selected(wanted.clone());
    let (_, sel_outputs) = run_orcsmc(&model, &ys, &cfg_sel, key).unwrap();

    assert_eq!(sel_outputs.len(), wanted.len());
    for sel in &sel_outputs {
        let full = all_outputs.iter().find(|o| o.t == sel.t).unwrap();
        assert_eq!(sel.log_z, full.log_z, "t = {}", sel.t);
        assert_eq!(sel.filter_mean, full.filter_mean);
        assert_eq!(sel.ess, full.ess);
    }
}

#[test]
fn lag_one_learns_the_fully_adapted_twist() {
    // With L = 1 the window is {t}, the lookahead twist is unit, and the
    // learned twist fits log g_t exactly for a linear-Gaussian model:
    // a = -C^2/(2D), b = y C / D.
    let model = scalar_model(0.415);
    let (_, ys) = model.simulate(6, &mut StreamKey::new(57).step_rng(0));
    let mut cfg = OrcsmcConfig::new(64, 1, 1);
    cfg.reg = orcsmc::RegConfig::exact();
    let mut state = WindowState::new(&model, cfg, StreamKey::new(4));
    for y in &ys {
        state.step(&model, y.clone(), false).unwrap();
        let (s, psi) = state.window_twists().last().unwrap();
        assert_eq!(s, y.t);
        assert!((psi.a[0] + 0.5).abs() < 1e-8, "a = {}", psi.a[0]);
        assert!((psi.b[0] - y.y[0]).abs() < 1e-8, "b = {}", psi.b[0]);
    }
}

#[test]
fn keep_all_full_paths_cover_the_whole_run() {
    let model = lg_model_2d();
    let (_, ys) = model.simulate(14, &mut StreamKey::new(58).step_rng(0));
    let mut cfg = OrcsmcConfig::new(16, 4, 2);
    cfg.keep_all = true;
    let (state, _) = run_orcsmc(&model, &ys, &cfg, StreamKey::new(6)).unwrap();
    let (paths, log_weights) = state.full_paths();
    assert_eq!(paths.len(), 16);
    assert_eq!(log_weights.len(), 16);
    for path in &paths {
        assert_eq!(path.len(), 14, "paths span 1..=T");
    }
    // Window paths are the tail of the full paths.
    let (win_paths, _) = state.window_paths();
    let offset = 14 - win_paths[0].len();
    for (full, win) in paths.iter().zip(&win_paths) {
        assert_eq!(&full[offset..], &win[..]);
    }
}

#[test]
fn stochastic_volatility_long_run_stays_finite() {
    let (alpha, sigma, beta) = (0.986, 0.13, 0.69);
    let var0 = sigma * sigma / (1.0 - alpha * alpha);
    let model = ModelSpec::new(
        dvector![0.0],
        dmatrix![var0],
        dmatrix![alpha],
        dmatrix![sigma * sigma],
        ObservationModel::StochasticVolatility(SvObs::new(beta).unwrap()),
    )
    .unwrap();
    let (_, ys) = model.simulate(945, &mut StreamKey::new(59).step_rng(0));
    let cfg = OrcsmcConfig::new(200, 4, 5);
    let (_, outputs) = run_orcsmc(&model, &ys, &cfg, StreamKey::new(12)).unwrap();
    assert_eq!(outputs.len(), 945);
    assert!(outputs.iter().all(|o| o.log_z.is_finite()));
    // Bounded cost holds over the long horizon too.
    let steady: Vec<_> = outputs.iter().filter(|o| o.t > 4).collect();
    assert!(steady
        .iter()
        .all(|o| o.cost.apf_steps + o.cost.learn_calls == 11 * 4 + 1));
}
