//! The `analyze` subcommand: smoothing-marginal Wasserstein-1 curves,
//! standardized-marginal summaries, and the per-run RMSE table, all against
//! one oracle file. Every input must carry the oracle's dataset id.

use anyhow::{bail, Context, Result};
use orcsmc::oracle::{standardize_marginal, wasserstein1_to_gaussian};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::dataset::fmt_f64;
use crate::oracle_cmd::OracleFile;

struct RunInputs {
    label: String,
    summary: serde_json::Value,
    /// (t, coord) -> (samples, weights), from smoothing.csv if present.
    smoothing: BTreeMap<(usize, usize), (Vec<f64>, Vec<f64>)>,
}

fn load_run(dir: &Path) -> Result<RunInputs> {
    let label = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("summary.json"))
            .with_context(|| format!("cannot read {}/summary.json", dir.display()))?,
    )?;
    let mut smoothing = BTreeMap::new();
    let smoothing_path = dir.join("smoothing.csv");
    if smoothing_path.exists() {
        let mut reader = csv::Reader::from_path(&smoothing_path)?;
        for record in reader.records() {
            let record = record?;
            let t: usize = record[1].parse()?;
            let coord: usize = record[2].parse()?;
            let x: f64 = record[3].parse()?;
            let w: f64 = record[4].parse()?;
            let entry = smoothing.entry((t, coord)).or_insert_with(|| (Vec::new(), Vec::new()));
            entry.0.push(x);
            entry.1.push(w);
        }
    }
    Ok(RunInputs {
        label,
        summary,
        smoothing,
    })
}

pub fn cmd_analyze(run_dirs: &[PathBuf], oracle_path: &Path, out_dir: &Path) -> Result<()> {
    let oracle = OracleFile::load(oracle_path)?;
    let runs: Vec<RunInputs> = run_dirs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    for run in &runs {
        let id = run.summary["dataset_id"].as_str().unwrap_or_default();
        if id != oracle.dataset_id {
            bail!(
                "provenance mismatch: run `{}` was produced from dataset {}, oracle from {}",
                run.label,
                id,
                oracle.dataset_id
            );
        }
    }

    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let mut w = csv::Writer::from_path(out_dir.join("analysis.csv"))?;
    w.write_record(["kind", "run", "t", "coord", "value", "value2"])?;

    // Per-run headline rows for table assembly across lags/dimensions.
    for run in &runs {
        let lag = run.summary["config"]["algorithm"]["lag"].as_u64().unwrap_or(0);
        if let Some(rmse) = run.summary["oracle"]["rmse_relative_z"].as_f64() {
            w.write_record([
                "rmse_relative_z",
                &run.label,
                "",
                "",
                &fmt_f64(rmse),
                &lag.to_string(),
            ])?;
        }
        if let (Some(mean), Some(grid)) = (
            run.summary["stats"]["mean_log_z"].as_f64(),
            oracle.grid.as_ref(),
        ) {
            w.write_record([
                "mean_log_z_error_vs_grid",
                &run.label,
                "",
                "",
                &fmt_f64(mean - grid.log_z),
                &lag.to_string(),
            ])?;
        }
    }

    // Smoothing-marginal comparisons need the exact Gaussian marginals.
    let Some(kalman) = &oracle.kalman else {
        w.flush()?;
        return Ok(());
    };
    for run in &runs {
        if run.smoothing.is_empty() {
            continue;
        }
        let mut per_t: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for marg in &kalman.smoothed {
            let Some((samples, weights)) = run.smoothing.get(&(marg.t, marg.coord)) else {
                continue;
            };
            let w1 = wasserstein1_to_gaussian(samples, weights, marg.mean, marg.sd);
            w.write_record([
                "w1",
                &run.label,
                &marg.t.to_string(),
                &marg.coord.to_string(),
                &fmt_f64(w1),
                "",
            ])?;
            per_t.entry(marg.t).or_default().push(w1);

            let standardized = standardize_marginal(samples, marg.mean, marg.sd);
            let mean: f64 = standardized
                .iter()
                .zip(weights)
                .map(|(x, w)| x * w)
                .sum();
            let var: f64 = standardized
                .iter()
                .zip(weights)
                .map(|(x, w)| (x - mean) * (x - mean) * w)
                .sum();
            w.write_record([
                "std_moment",
                &run.label,
                &marg.t.to_string(),
                &marg.coord.to_string(),
                &fmt_f64(mean),
                &fmt_f64(var.sqrt()),
            ])?;
        }
        for (t, values) in per_t {
            let avg = values.iter().sum::<f64>() / values.len() as f64;
            w.write_record(["w1_avg", &run.label, &t.to_string(), "", &fmt_f64(avg), ""])?;
        }
    }
    w.flush()?;
    Ok(())
}
