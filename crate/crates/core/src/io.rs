//! File ingestion and result persistence.
//!
//! Point files are plain text: one point per line, coordinates separated by
//! whitespace or commas, `#` starts a comment, and the dimension is inferred
//! from the first data line.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bench::{SuiteAggregate, TrialRecord, TrialSpec};
use crate::error::{Error, Result};
use crate::solver::{SolverConfig, SolverResult};
use crate::transform::{ModelKind, PointSet};

/// Reads a whitespace- or comma-separated point file.
pub fn read_point_set(path: &Path) -> Result<PointSet> {
    let text = std::fs::read_to_string(path)?;
    let mut points: Vec<Vec<f64>> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let coords: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|tok| !tok.is_empty())
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    Error::Parse(format!(
                        "{}:{}: {tok:?} is not a number",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = points.first() {
            if coords.len() != first.len() {
                return Err(Error::Parse(format!(
                    "{}:{}: expected {} coordinates, got {}",
                    path.display(),
                    lineno + 1,
                    first.len(),
                    coords.len()
                )));
            }
        }
        points.push(coords);
    }
    if points.is_empty() {
        return Err(Error::Parse(format!(
            "{}: no data lines",
            path.display()
        )));
    }
    PointSet::from_points(&points)
}

/// Echo of the registration request stored in the output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationConfigEcho {
    pub model_path: String,
    pub scene_path: String,
    pub kind: ModelKind,
    pub np_request: f64,
    pub n_p: usize,
    pub eps0: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

/// Stable JSON schema of a registration run. Indices are 0-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationOutput {
    pub matches: Vec<(usize, usize)>,
    pub phi: Vec<f64>,
    pub energy: f64,
    pub certificate_eps: f64,
    pub iterations: usize,
    pub runtime_seconds: f64,
    pub status: String,
    pub config: RegistrationConfigEcho,
}

impl RegistrationOutput {
    pub fn new(
        result: &SolverResult,
        runtime_seconds: f64,
        config: RegistrationConfigEcho,
    ) -> Self {
        Self {
            matches: result.correspondence.pairs().to_vec(),
            phi: result.phi.iter().cloned().collect(),
            energy: result.energy,
            certificate_eps: result.certificate_eps,
            iterations: result.iterations,
            runtime_seconds,
            status: result.status.name().to_string(),
            config,
        }
    }

    pub fn phi_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.phi)
    }
}

/// Benchmark suite configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub trials: Vec<TrialSpec>,
    #[serde(default)]
    pub solver: SolverConfigFile,
}

/// Solver section of the suite file, all fields optional.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfigFile {
    pub eps0: Option<f64>,
    pub max_iterations: Option<usize>,
    pub rng_seed: Option<u64>,
}

impl Default for SolverConfigFile {
    fn default() -> Self {
        Self {
            eps0: None,
            max_iterations: None,
            rng_seed: None,
        }
    }
}

impl SolverConfigFile {
    pub fn resolve(&self) -> SolverConfig {
        let defaults = SolverConfig::default();
        SolverConfig {
            eps0: self.eps0.unwrap_or(defaults.eps0),
            max_iterations: self.max_iterations.unwrap_or(defaults.max_iterations),
            rng_seed: self.rng_seed.unwrap_or(defaults.rng_seed),
        }
    }
}

pub fn read_suite_config(path: &Path) -> Result<SuiteConfig> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// One flattened CSV row per trial.
pub fn write_trials_csv(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    writer
        .write_record([
            "trial_id",
            "shape",
            "kind",
            "n_outliers",
            "occlusion_fraction",
            "n_p",
            "rms_error",
            "energy",
            "certificate_eps",
            "iterations",
            "runtime_seconds",
            "status",
        ])
        .map_err(csv_err)?;
    for r in records {
        writer
            .write_record([
                r.trial_id.to_string(),
                r.shape.clone(),
                r.kind.name().to_string(),
                r.n_outliers.to_string(),
                r.occlusion_fraction.to_string(),
                r.n_p.to_string(),
                r.result.rms_error.map(|v| v.to_string()).unwrap_or_default(),
                r.result.energy.map(|v| v.to_string()).unwrap_or_default(),
                r.result
                    .certificate_eps
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
                r.result.iterations.to_string(),
                r.result.runtime_seconds.to_string(),
                r.result.status.clone(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

pub fn write_aggregate_json(path: &Path, aggregate: &SuiteAggregate) -> Result<()> {
    let text = serde_json::to_string_pretty(aggregate)
        .map_err(|e| Error::Parse(format!("json: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a rectangular numeric CSV (no header) as an assignment cost matrix.
pub fn read_cost_csv(path: &Path) -> Result<nalgebra::DMatrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>().map_err(|_| {
                    Error::Parse(format!(
                        "{}:{}: {t:?} is not a number",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse(format!(
                    "{}:{}: ragged row",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse(format!("{}: empty matrix", path.display())));
    }
    Ok(nalgebra::DMatrix::from_fn(rows.len(), rows[0].len(), |r, c| {
        rows[r][c]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_points_with_comments_and_commas() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.txt");
        std::fs::write(&path, "# header\n1.0, 2.0\n3 4\n\n5,6\n").unwrap();
        let ps = read_point_set(&path).unwrap();
        assert_eq!(ps.len(), 3);
        assert_eq!(ps.dim(), 2);
        assert_eq!(ps.point(2)[1], 6.0);
    }

    #[test]
    fn rejects_ragged_and_non_numeric() {
        let dir = tempfile::tempdir().unwrap();
        let ragged = dir.path().join("ragged.txt");
        std::fs::write(&ragged, "1 2\n3 4 5\n").unwrap();
        assert!(matches!(read_point_set(&ragged), Err(Error::Parse(_))));

        let bad = dir.path().join("bad.txt");
        std::fs::write(&bad, "1 x\n").unwrap();
        assert!(matches!(read_point_set(&bad), Err(Error::Parse(_))));

        let empty = dir.path().join("empty.txt");
        std::fs::write(&empty, "# nothing\n").unwrap();
        assert!(matches!(read_point_set(&empty), Err(Error::Parse(_))));
    }

    #[test]
    fn cost_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cost.csv");
        std::fs::write(&path, "1,2,3\n4,5,6\n").unwrap();
        let m = read_cost_csv(&path).unwrap();
        assert_eq!(m.nrows(), 2);
        assert_eq!(m.ncols(), 3);
        assert_eq!(m[(1, 2)], 6.0);
    }
}
