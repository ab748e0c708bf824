//! The `oracle` subcommand: exact/brute-force references for a dataset,
//! written as one JSON file keyed by the dataset's provenance id.

use anyhow::{bail, Context, Result};
use orcsmc::model::ObservationModel;
use orcsmc::oracle::{grid_filter, kalman_filter_smoother, GridSpec};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::config::ExperimentConfig;

#[derive(Serialize, Deserialize)]
pub struct SmoothedMarginal {
    pub t: usize,
    pub coord: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Serialize, Deserialize)]
pub struct KalmanOracle {
    pub log_z: f64,
    pub log_z_per_time: Vec<f64>,
    pub smoothed: Vec<SmoothedMarginal>,
}

#[derive(Serialize, Deserialize)]
pub struct GridOracle {
    pub log_z: f64,
    pub log_z_per_time: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub refinement_gap: f64,
    pub coarse_grid_warning: bool,
}

#[derive(Serialize, Deserialize)]
pub struct OracleFile {
    pub dataset_id: String,
    pub kalman: Option<KalmanOracle>,
    pub grid: Option<GridOracle>,
}

impl OracleFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("bad oracle file {}", path.display()))
    }
}

pub fn cmd_oracle(cfg: &ExperimentConfig, data_path: &Path, out_dir: &Path) -> Result<()> {
    let model = cfg.model.build()?;
    let ys = crate::dataset::read_dataset(data_path, &model)?;
    let dataset_id = crate::dataset::dataset_id(data_path)?;

    let kalman = match model.obs() {
        ObservationModel::LinearGaussian(_) => {
            let res = kalman_filter_smoother(&model, &ys)?;
            let mut smoothed = Vec::new();
            for (idx, (mean, cov)) in res
                .smoothed_means
                .iter()
                .zip(&res.smoothed_covs)
                .enumerate()
            {
                for coord in 0..model.dim() {
                    smoothed.push(SmoothedMarginal {
                        t: idx + 1,
                        coord: coord + 1,
                        mean: mean[coord],
                        sd: cov[(coord, coord)].sqrt(),
                    });
                }
            }
            Some(KalmanOracle {
                log_z: res.log_z,
                log_z_per_time: res.log_z_per_time,
                smoothed,
            })
        }
        _ => None,
    };

    let grid = if model.dim() == 1 {
        let spec = GridSpec::for_model(&model)?;
        let res = grid_filter(&model, &ys, &spec)?;
        Some(GridOracle {
            log_z: res.log_z,
            log_z_per_time: res.log_z_per_time,
            lo: spec.lo,
            hi: spec.hi,
            n: spec.n,
            refinement_gap: res.refinement_gap,
            coarse_grid_warning: res.coarse_grid_warning,
        })
    } else {
        None
    };

    if kalman.is_none() && grid.is_none() {
        bail!("no oracle applies: non-Gaussian observations need d = 1");
    }

    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let file = OracleFile {
        dataset_id,
        kalman,
        grid,
    };
    std::fs::write(
        out_dir.join("oracle.json"),
        serde_json::to_string_pretty(&file)?,
    )?;
    Ok(())
}
