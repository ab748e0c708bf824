//! The `run` subcommand: execute the configured algorithm over R
//! replicates (in parallel, with per-replicate derived streams), write
//! per-time rows and a summary.
//!
//! Deterministic outputs: `runs.csv`, `summary.json`, `smoothing.csv`.
//! Wall-clock timings go to `timing.csv`, which is the one file excluded
//! from the byte-identical determinism contract.

use anyhow::{bail, Context, Result};
use orcsmc::model::{ModelSpec, Observation};
use orcsmc::oracle::kalman_filter_smoother;
use orcsmc::stream::STREAM_ESTIMATION;
use orcsmc::{csmc, run_bpf, FilterConfig, StreamKey, WindowState};
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;
use std::time::Instant;

use crate::config::{ExperimentConfig, Method};
use crate::dataset::fmt_f64;

#[derive(Clone, Debug)]
pub struct StepRow {
    pub replicate: usize,
    pub t: usize,
    pub log_z: f64,
    pub ess: f64,
    pub resampled: bool,
    pub filter_mean_1: f64,
}

#[derive(Clone, Debug)]
struct SmoothingRow {
    t: usize,
    coord: usize,
    x: f64,
    weight: f64,
}

#[derive(Clone, Debug)]
struct ReplicateOutput {
    replicate: usize,
    rows: Vec<StepRow>,
    final_log_z: f64,
    propagations: usize,
    /// (t, milliseconds); a single `t = 0` row for the offline methods.
    timing: Vec<(usize, f64)>,
    smoothing: Vec<SmoothingRow>,
}

#[derive(Serialize)]
struct Failure {
    replicate: usize,
    error: String,
}

#[derive(Serialize)]
struct LogZStats {
    mean_log_z: f64,
    median_log_z: f64,
    std_log_z: f64,
}

#[derive(Serialize)]
struct OracleStats {
    oracle_log_z: f64,
    mean_relative_z: f64,
    median_relative_z: f64,
    std_relative_z: f64,
    /// Root mean square of (Z^N/Z - 1) across replicates.
    rmse_relative_z: f64,
    std_log_relative_z: f64,
}

#[derive(Serialize)]
struct ReplicateLogZ {
    replicate: usize,
    log_z: f64,
}

#[derive(Serialize)]
struct Summary {
    dataset_id: String,
    method: Method,
    n_particles: usize,
    horizon: usize,
    replicates: usize,
    seed: u64,
    total_propagations: usize,
    failures: Vec<Failure>,
    per_replicate: Vec<ReplicateLogZ>,
    stats: Option<LogZStats>,
    oracle: Option<OracleStats>,
    config: ExperimentConfig,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn smoothing_rows(paths: &[Vec<nalgebra::DVector<f64>>], log_weights: &[f64]) -> Vec<SmoothingRow> {
    let mut rows = Vec::new();
    if paths.is_empty() {
        return rows;
    }
    let horizon = paths[0].len();
    let d = paths[0][0].len();
    for t in 0..horizon {
        for coord in 0..d {
            for (path, &lw) in paths.iter().zip(log_weights) {
                rows.push(SmoothingRow {
                    t: t + 1,
                    coord: coord + 1,
                    x: path[t][coord],
                    weight: lw.exp(),
                });
            }
        }
    }
    rows
}

fn run_replicate(
    replicate: usize,
    model: &ModelSpec,
    ys: &[Observation],
    cfg: &ExperimentConfig,
    seed: u64,
    dump_smoothing: bool,
) -> Result<ReplicateOutput, String> {
    let key = StreamKey::new(seed.wrapping_add(replicate as u64));
    let n = cfg.algorithm.resolved_n();
    let as_err = |e: orcsmc::SmcError| e.to_string();
    match cfg.algorithm.method {
        Method::Bpf => {
            let fcfg = FilterConfig {
                n_particles: n,
                kappa_ess: cfg.algorithm.kappa_ess,
                resampling: cfg.algorithm.resampling,
            };
            let started = Instant::now();
            let run = run_bpf(model, ys, &fcfg, key.child(STREAM_ESTIMATION), false)
                .map_err(as_err)?;
            let elapsed = started.elapsed().as_secs_f64() * 1e3;
            let rows = run
                .diagnostics
                .iter()
                .map(|d| StepRow {
                    replicate,
                    t: d.t,
                    log_z: d.log_z,
                    ess: d.ess_final,
                    resampled: d.resampled,
                    filter_mean_1: d.filter_mean_first,
                })
                .collect();
            Ok(ReplicateOutput {
                replicate,
                rows,
                final_log_z: run.log_z(),
                propagations: ys.len() * n,
                timing: vec![(0, elapsed)],
                smoothing: Vec::new(),
            })
        }
        Method::Csmc => {
            let started = Instant::now();
            let run = csmc(model, ys, &cfg.algorithm.csmc_config(), key).map_err(as_err)?;
            let elapsed = started.elapsed().as_secs_f64() * 1e3;
            let rows = run
                .run
                .diagnostics
                .iter()
                .map(|d| StepRow {
                    replicate,
                    t: d.t,
                    log_z: d.log_z,
                    ess: d.ess_final,
                    resampled: d.resampled,
                    filter_mean_1: d.filter_mean_first,
                })
                .collect();
            let smoothing = if dump_smoothing {
                let (paths, log_weights) = run.paths();
                smoothing_rows(&paths, log_weights)
            } else {
                Vec::new()
            };
            Ok(ReplicateOutput {
                replicate,
                rows,
                final_log_z: run.log_z(),
                propagations: cfg.algorithm.iterations * ys.len() * n,
                timing: vec![(0, elapsed)],
                smoothing,
            })
        }
        Method::Orcsmc => {
            let ocfg = cfg.algorithm.orcsmc_config(&cfg.run);
            let mut state = WindowState::new(model, ocfg, key);
            let mut rows = Vec::new();
            let mut timing = Vec::new();
            let t_last = ys.last().expect("non-empty").t;
            for y in ys {
                let started = Instant::now();
                let out = state
                    .step(model, y.clone(), y.t == t_last)
                    .map_err(as_err)?;
                timing.push((y.t, started.elapsed().as_secs_f64() * 1e3));
                if let Some(out) = out {
                    rows.push(StepRow {
                        replicate,
                        t: out.t,
                        log_z: out.log_z,
                        ess: out.ess,
                        resampled: out.resampled,
                        filter_mean_1: out.filter_mean[0],
                    });
                }
            }
            let final_log_z = rows.last().map(|r| r.log_z).unwrap_or(f64::NAN);
            let smoothing = if dump_smoothing {
                let (paths, log_weights) = state.full_paths();
                smoothing_rows(&paths, log_weights)
            } else {
                Vec::new()
            };
            Ok(ReplicateOutput {
                replicate,
                rows,
                final_log_z,
                propagations: state.counters().propagations,
                timing,
                smoothing,
            })
        }
    }
}

pub fn cmd_run(
    cfg: &ExperimentConfig,
    data_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
    replicates_override: Option<usize>,
) -> Result<()> {
    let model = cfg.model.build()?;
    let ys = crate::dataset::read_dataset(data_path, &model)?;
    if ys.len() != cfg.run.horizon {
        bail!(
            "dataset horizon {} does not match configured horizon {}",
            ys.len(),
            cfg.run.horizon
        );
    }
    if cfg.run.smoothing_dump
        && cfg.algorithm.method == Method::Orcsmc
        && !cfg.run.keep_all_paths
    {
        bail!("smoothing_dump with orcsmc requires keep_all_paths");
    }
    let seed = seed_override.unwrap_or(cfg.run.seed);
    let replicates = replicates_override.unwrap_or(cfg.run.replicates);
    let dataset_id = crate::dataset::dataset_id(data_path)?;

    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;

    let results: Vec<Result<ReplicateOutput, String>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            run_replicate(
                r,
                &model,
                &ys,
                cfg,
                seed,
                cfg.run.smoothing_dump && r == 0,
            )
        })
        .collect();

    // Deterministic files are written serially in replicate order.
    let mut runs = csv::Writer::from_path(out_dir.join("runs.csv"))?;
    runs.write_record(["replicate", "t", "log_z", "ess", "resampled", "filter_mean_1"])?;
    for res in results.iter().flatten() {
        for row in &res.rows {
            runs.write_record([
                row.replicate.to_string(),
                row.t.to_string(),
                fmt_f64(row.log_z),
                fmt_f64(row.ess),
                row.resampled.to_string(),
                fmt_f64(row.filter_mean_1),
            ])?;
        }
    }
    runs.flush()?;

    let mut timing = csv::Writer::from_path(out_dir.join("timing.csv"))?;
    timing.write_record(["replicate", "t", "wall_ms"])?;
    for res in results.iter().flatten() {
        for (t, ms) in &res.timing {
            timing.write_record([
                res.replicate.to_string(),
                t.to_string(),
                format!("{ms:.3}"),
            ])?;
        }
    }
    timing.flush()?;

    if cfg.run.smoothing_dump {
        let mut smoothing = csv::Writer::from_path(out_dir.join("smoothing.csv"))?;
        smoothing.write_record(["replicate", "t", "coord", "x", "weight"])?;
        for res in results.iter().flatten() {
            for row in &res.smoothing {
                smoothing.write_record([
                    res.replicate.to_string(),
                    row.t.to_string(),
                    row.coord.to_string(),
                    fmt_f64(row.x),
                    fmt_f64(row.weight),
                ])?;
            }
        }
        smoothing.flush()?;
    }

    let failures: Vec<Failure> = results
        .iter()
        .enumerate()
        .filter_map(|(r, res)| {
            res.as_ref().err().map(|e| Failure {
                replicate: r,
                error: e.clone(),
            })
        })
        .collect();
    let per_replicate: Vec<ReplicateLogZ> = results
        .iter()
        .flatten()
        .map(|res| ReplicateLogZ {
            replicate: res.replicate,
            log_z: res.final_log_z,
        })
        .collect();

    let log_zs: Vec<f64> = per_replicate.iter().map(|r| r.log_z).collect();
    let stats = (!log_zs.is_empty()).then(|| {
        let n = log_zs.len() as f64;
        let mean = log_zs.iter().sum::<f64>() / n;
        let var = if log_zs.len() > 1 {
            log_zs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mut sorted = log_zs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        LogZStats {
            mean_log_z: mean,
            median_log_z: median(&sorted),
            std_log_z: var.sqrt(),
        }
    });

    // Relative-Z statistics whenever the exact oracle applies.
    let oracle = kalman_filter_smoother(&model, &ys).ok().and_then(|kalman| {
        if log_zs.is_empty() {
            return None;
        }
        let ratios: Vec<f64> = log_zs.iter().map(|lz| (lz - kalman.log_z).exp()).collect();
        let n = ratios.len() as f64;
        let mean = ratios.iter().sum::<f64>() / n;
        let var = if ratios.len() > 1 {
            ratios.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mut sorted = ratios.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rmse = (ratios.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>() / n).sqrt();
        let logs: Vec<f64> = log_zs.iter().map(|lz| lz - kalman.log_z).collect();
        let lmean = logs.iter().sum::<f64>() / n;
        let lvar = if logs.len() > 1 {
            logs.iter().map(|v| (v - lmean) * (v - lmean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(OracleStats {
            oracle_log_z: kalman.log_z,
            mean_relative_z: mean,
            median_relative_z: median(&sorted),
            std_relative_z: var.sqrt(),
            rmse_relative_z: rmse,
            std_log_relative_z: lvar.sqrt(),
        })
    });

    let summary = Summary {
        dataset_id,
        method: cfg.algorithm.method,
        n_particles: cfg.algorithm.resolved_n(),
        horizon: cfg.run.horizon,
        replicates,
        seed,
        total_propagations: results
            .iter()
            .flatten()
            .map(|r| r.propagations)
            .sum(),
        failures,
        per_replicate,
        stats,
        oracle,
        config: cfg.clone(),
    };
    let json = serde_json::to_string_pretty(&summary)?;
    std::fs::write(out_dir.join("summary.json"), json)?;
    Ok(())
}
