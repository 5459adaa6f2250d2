//! Command implementations behind the binary: registration, benchmark
//! suites, and the assignment debug surface. Each returns the process exit
//! code; the binary itself only parses arguments.

use std::path::{Path, PathBuf};

use crate::assignment::{brute_force_assignment, max_kcard_assignment, AssignmentProblem};
use crate::error::{Error, Result};
use crate::io::{
    read_cost_csv, read_point_set, read_suite_config, write_aggregate_json, write_trials_csv,
    RegistrationConfigEcho, RegistrationOutput,
};
use crate::solver::{run_inner_approximation, SolverConfig, SolverStatus};
use crate::transform::ModelKind;

/// A registration request as it arrives from the command line.
#[derive(Debug, Clone)]
pub struct RegistrationRequest {
    pub model_path: PathBuf,
    pub scene_path: PathBuf,
    pub kind: ModelKind,
    /// `< 1`: fraction of `min(n_x, n_y)` (floor applied); `≥ 1`: absolute
    /// count (must be integral).
    pub np: f64,
    pub eps0: f64,
    pub max_iterations: usize,
    pub seed: u64,
    /// Output JSON path; stdout when absent.
    pub output_path: Option<PathBuf>,
}

/// Resolves the `np` convention against the loaded point counts.
pub fn resolve_np(np: f64, n_x: usize, n_y: usize) -> Result<usize> {
    if !np.is_finite() || np <= 0.0 {
        return Err(Error::InvalidInput(format!("invalid n_p request {np}")));
    }
    if np < 1.0 {
        Ok(((np * n_x.min(n_y) as f64).floor() as usize).max(1))
    } else {
        if np.fract() != 0.0 {
            return Err(Error::InvalidInput(format!(
                "absolute n_p must be an integer, got {np}"
            )));
        }
        Ok(np as usize)
    }
}

/// Runs a registration and writes the result JSON. Exit code 0 on
/// convergence, 2 on iteration cap.
pub fn cmd_register(req: &RegistrationRequest) -> Result<i32> {
    let model = read_point_set(&req.model_path)?;
    let scene = read_point_set(&req.scene_path)?;
    if model.dim() != req.kind.n_dim() || scene.dim() != req.kind.n_dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} expects {}-dimensional points; model is {}-dimensional, scene {}-dimensional",
            req.kind,
            req.kind.n_dim(),
            model.dim(),
            scene.dim()
        )));
    }
    let n_p = resolve_np(req.np, model.len(), scene.len())?;
    let config = SolverConfig {
        eps0: req.eps0,
        max_iterations: req.max_iterations,
        rng_seed: req.seed,
    };
    let started = std::time::Instant::now();
    let result = run_inner_approximation(&model, &scene, req.kind, n_p, &config)?;
    let runtime = started.elapsed().as_secs_f64();
    log::info!(
        "registered {} against {}: E = {:.6e}, status {}",
        req.model_path.display(),
        req.scene_path.display(),
        result.energy,
        result.status.name()
    );

    let output = RegistrationOutput::new(
        &result,
        runtime,
        RegistrationConfigEcho {
            model_path: req.model_path.display().to_string(),
            scene_path: req.scene_path.display().to_string(),
            kind: req.kind,
            np_request: req.np,
            n_p,
            eps0: req.eps0,
            max_iterations: req.max_iterations,
            seed: req.seed,
        },
    );
    let json = serde_json::to_string_pretty(&output)
        .map_err(|e| Error::Parse(format!("json: {e}")))?;
    match &req.output_path {
        Some(path) => std::fs::write(path, &json)?,
        None => println!("{json}"),
    }

    Ok(match result.status {
        SolverStatus::Converged => 0,
        SolverStatus::IterationCap => 2,
        SolverStatus::Degenerate => 2,
    })
}

/// Runs a benchmark suite config and writes the per-trial CSV plus the
/// aggregate JSON into `out_dir`.
pub fn cmd_bench(config_path: &Path, out_dir: &Path) -> Result<i32> {
    let suite = read_suite_config(config_path)?;
    for (idx, spec) in suite.trials.iter().enumerate() {
        spec.validate()
            .map_err(|e| Error::InvalidSpec(format!("trial {idx}: {e}")))?;
    }
    let config = suite.solver.resolve();
    std::fs::create_dir_all(out_dir)?;
    let (records, aggregate) = crate::bench::run_suite(&suite.trials, &config);
    write_trials_csv(&out_dir.join("trials.csv"), &records)?;
    write_aggregate_json(&out_dir.join("aggregate.json"), &aggregate)?;
    log::info!(
        "suite finished: {}/{} trials solved",
        aggregate.n_solved,
        aggregate.n_trials
    );
    Ok(0)
}

/// Solves an assignment instance from a CSV cost matrix and prints the
/// matching; cross-checks against the enumeration oracle when small enough.
pub fn cmd_lap(cost_path: &Path, k: usize) -> Result<i32> {
    let cost = read_cost_csv(cost_path)?;
    let (n_x, n_y) = (cost.nrows(), cost.ncols());
    let prob = AssignmentProblem::new(cost, k)?;
    let sol = max_kcard_assignment(&prob)?;
    println!("value {}", sol.value);
    for &(i, j) in sol.pairs.pairs() {
        println!("{i} {j}");
    }
    if n_x <= 8 && n_y <= 8 {
        let oracle = brute_force_assignment(&prob)?;
        if oracle.value == sol.value {
            println!("# oracle check: ok (value {})", oracle.value);
        } else {
            return Err(Error::InvalidInput(format!(
                "oracle mismatch: solver {} vs oracle {}",
                sol.value, oracle.value
            )));
        }
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn np_resolution_conventions() {
        assert_eq!(resolve_np(0.9, 30, 40).unwrap(), 27);
        assert_eq!(resolve_np(0.9, 40, 30).unwrap(), 27);
        assert_eq!(resolve_np(10.0, 30, 40).unwrap(), 10);
        assert!(resolve_np(10.5, 30, 40).is_err());
        assert!(resolve_np(0.0, 30, 40).is_err());
        assert!(resolve_np(-1.0, 30, 40).is_err());
    }
}
