//! Developer scratch: watch the solver trajectory on one instance.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rpm_align::solver::{run_detailed, SolverConfig};
use rpm_align::transform::{apply, ModelKind, PointSet};

fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::new()
            .filter("RPM_LOG_LEVEL")
            .default_filter_or("debug"),
    )
    .init();

    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(400);
    let eps0: f64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.05);
    let n: usize = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    let n_p: usize = std::env::args()
        .nth(4)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = PointSet::new(DMatrix::from_fn(2, n, |_, _| rng.gen_range(-2.0..2.0))).unwrap();
    let phi = DVector::from_column_slice(&[
        rng.gen_range(0.5..1.5),
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    ]);
    let sigma = 0.1;
    let cols: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            apply(ModelKind::Similarity2d, &phi, &model.point(i)).unwrap()
                + DVector::from_fn(2, |_, _| rng.gen_range(-sigma..sigma))
        })
        .collect();
    let scene = PointSet::new(DMatrix::from_columns(&cols)).unwrap();

    let config = SolverConfig {
        eps0,
        max_iterations: 200,
        rng_seed: 0,
    };
    let started = std::time::Instant::now();
    match run_detailed(&model, &scene, ModelKind::Similarity2d, n_p, &config) {
        Ok(d) => {
            println!(
                "status {:?}, E = {:.6e}, certificate = {:.4}, iterations = {}, facets = {}, laps = {}, dim = {}/{} in {:.2?}",
                d.result.status,
                d.result.energy,
                d.result.certificate_eps,
                d.result.iterations,
                d.trace.facets.len(),
                d.trace.lap_solves,
                d.trace.effective_dim,
                d.trace.n_u,
                started.elapsed()
            );
        }
        Err(e) => println!("error: {e}"),
    }
}
