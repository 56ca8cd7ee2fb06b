//! CSV and JSON writers.
//!
//! Every trajectory CSV starts with a header `t,x1,...,xd` followed by one
//! row per grid node. Floats use the shortest round-trip representation, so
//! identical runs give identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use mortensen_core::observers::StepDiagnostics;
use mortensen_core::Trajectory;
use serde::Serialize;

use crate::error::CliError;

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::io(path, std::io::Error::other(e))
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=traj.dim()).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (t, x) in traj.grid().nodes().zip(traj.values()) {
        let mut row = vec![t.to_string()];
        row.extend(x.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_diagnostics(path: &Path, traj: &Trajectory, steps: &[StepDiagnostics]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record([
        "t",
        "grad_residual",
        "hessian_min_eig",
        "inner_iterations",
        "step_accepted",
        "regularization",
    ])
    .map_err(|e| csv_error(path, e))?;
    for (t, d) in traj.grid().nodes().zip(steps) {
        w.write_record([
            t.to_string(),
            d.grad_residual.to_string(),
            d.hessian_min_eig.to_string(),
            d.inner_iterations.to_string(),
            d.step_accepted.to_string(),
            d.regularization.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, std::io::Error::other(e)))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Reads a trajectory CSV back as `(times, rows)`.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::io(path, std::io::Error::other(e)))?;
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn artifact(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
