//! Dataset files: one CSV per simulated record, plus the content hash used
//! as a provenance id by every downstream artifact.

use anyhow::{bail, Context, Result};
use nalgebra::DVector;
use orcsmc::model::{ModelSpec, Observation};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Formats an f64 with Rust's shortest round-trip representation, which is
/// deterministic and parses back exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Writes `t, y_1.., x_1..` rows; states are included for diagnostics.
pub fn write_dataset(
    path: &Path,
    ys: &[Observation],
    xs: &[DVector<f64>],
) -> Result<()> {
    assert_eq!(ys.len(), xs.len());
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    let obs_dim = ys[0].y.len();
    let state_dim = xs[0].len();
    let mut header = vec!["t".to_string()];
    header.extend((1..=obs_dim).map(|j| format!("y_{j}")));
    header.extend((1..=state_dim).map(|j| format!("x_{j}")));
    w.write_record(&header)?;
    for (obs, x) in ys.iter().zip(xs) {
        let mut row = vec![obs.t.to_string()];
        row.extend(obs.y.iter().map(|&v| fmt_f64(v)));
        row.extend(x.iter().map(|&v| fmt_f64(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the observation columns back and validates them against the model.
pub fn read_dataset(path: &Path, model: &ModelSpec) -> Result<Vec<Observation>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let y_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, name)| name.starts_with("y_"))
        .map(|(i, _)| i)
        .collect();
    if y_cols.len() != model.obs_dim() {
        bail!(
            "dataset has {} observation columns, model expects {}",
            y_cols.len(),
            model.obs_dim()
        );
    }
    let mut ys = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let t: usize = record
            .get(0)
            .context("missing t column")?
            .parse()
            .context("bad t value")?;
        if t != row_idx + 1 {
            bail!("dataset rows must be t = 1..T in order, found t = {t}");
        }
        let y = DVector::from_iterator(
            y_cols.len(),
            y_cols
                .iter()
                .map(|&i| record.get(i).unwrap().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .context("bad observation value")?,
        );
        let obs = Observation::new(t, y);
        model
            .validate_observation(&obs)
            .with_context(|| format!("row t = {t}"))?;
        ys.push(obs);
    }
    if ys.is_empty() {
        bail!("dataset is empty");
    }
    Ok(ys)
}

/// SHA-256 of the file bytes, hex-encoded: the provenance id that ties run
/// and oracle artifacts to their dataset.
pub fn dataset_id(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}
