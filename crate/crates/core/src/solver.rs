//! The inner approximation driver.
//!
//! The reduced objective is concave over a spectrahedron that contains the
//! feasible region, so its global minimum over the feasible region is found
//! by growing a polytope `D` inside the spectrahedron until `D` covers the
//! feasible set: each round solves one linear assignment problem per new
//! facet to find the most violating feasible vertex, extends it as far as
//! the level set allows, and absorbs it into `D`. The incumbent is the best
//! feasible vertex seen anywhere along the way, and termination at
//! `max_i μ_i ≤ 1 + ε` certifies ε-coverage.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{maximize_over_feasible, AssignmentSolution};
use crate::error::{Error, Result};
use crate::geometry::{gamma_extension, FacetCache, PolytopeState};
use crate::objective::{build_reduction, CorrespondenceVector, ReducedObjective};
use crate::transform::{jacobian, solve_phi, ModelKind, PointSet};

/// Relative singular-value threshold for detecting directions of the
/// reduced space pinned by the cardinality constraints.
const FIXED_DIRECTION_TOL: f64 = 1e-10;
/// Relative threshold for the affine-rank test on candidate simplex
/// vertices.
const AFFINE_RANK_TOL: f64 = 1e-8;
/// How many randomized direction batches to try before declaring the
/// feasible region degenerate.
const MAX_DIRECTION_RETRIES: usize = 3;

/// Solver parameters. Numerical tolerances of the inner machinery live with
/// their modules; these are the user-facing knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Per-dimension termination tolerance; the coverage test uses
    /// `ε = dim · eps0`.
    pub eps0: f64,
    /// Cut budget.
    pub max_iterations: usize,
    /// Seed for randomized retries (and only those; the main path is
    /// deterministic).
    pub rng_seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eps0: 0.3,
            max_iterations: 10_000,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverStatus {
    /// Coverage certificate reached.
    Converged,
    /// Cut budget exhausted; the incumbent is still valid.
    IterationCap,
    /// Geometry degenerated mid-run; the incumbent is still valid.
    Degenerate,
}

impl SolverStatus {
    pub fn name(self) -> &'static str {
        match self {
            SolverStatus::Converged => "converged",
            SolverStatus::IterationCap => "iteration-cap",
            SolverStatus::Degenerate => "degenerate",
        }
    }
}

/// Final answer: the best correspondence found, its recovered parameters,
/// and the coverage certificate at termination.
#[derive(Debug, Clone)]
pub struct SolverResult {
    pub correspondence: CorrespondenceVector,
    pub phi: DVector<f64>,
    pub energy: f64,
    /// `max_i μ_i − 1` over all facets at termination.
    pub certificate_eps: f64,
    /// Number of cuts performed.
    pub iterations: usize,
    pub status: SolverStatus,
}

/// Diagnostics for audits and experiments.
#[derive(Debug, Clone)]
pub struct SolveTrace {
    /// Facet normals with their cached exact maxima at termination.
    pub facets: Vec<(DVector<f64>, f64)>,
    /// Incumbent energy after the initial vertices and after each round.
    pub incumbent_history: Vec<f64>,
    /// Generators that failed the strict in-spectrahedron check when
    /// inserted (fallback insertions at θ = 1 on boundary vertices).
    pub degenerate_insertions: usize,
    /// Linear assignment problems solved.
    pub lap_solves: usize,
    pub n_u: usize,
    pub effective_dim: usize,
}

/// Result bundle with the reduction and trace kept for inspection.
#[derive(Debug, Clone)]
pub struct DetailedSolve {
    pub result: SolverResult,
    pub reduction: ReducedObjective,
    pub trace: SolveTrace,
}

fn consider_witness(
    red: &ReducedObjective,
    pairs: &CorrespondenceVector,
    incumbent: &mut Option<(f64, CorrespondenceVector)>,
) {
    if let Ok(e) = red.energy_p(pairs) {
        let improves = match incumbent {
            Some((best, _)) => e < *best,
            None => true,
        };
        if improves {
            *incumbent = Some((e, pairs.clone()));
        }
    }
}

/// Orthonormal basis of the span of the correspondence-space constraint
/// normals that are forced to a constant by the cardinality choice.
fn forced_constraint_normals(n_x: usize, n_y: usize, n_p: usize) -> Vec<DVector<f64>> {
    let nxy = n_x * n_y;
    let mut normals: Vec<DVector<f64>> = vec![DVector::from_element(nxy, 1.0)];
    if n_p == n_x {
        for i in 0..n_x {
            let mut v = DVector::zeros(nxy);
            for j in 0..n_y {
                v[i * n_y + j] = 1.0;
            }
            normals.push(v);
        }
    }
    if n_p == n_y {
        for j in 0..n_y {
            let mut v = DVector::zeros(nxy);
            for i in 0..n_x {
                v[i * n_y + j] = 1.0;
            }
            normals.push(v);
        }
    }
    // Orthonormalize, dropping dependent normals.
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for mut v in normals {
        for b in &basis {
            let c = b.dot(&v);
            v -= b * c;
        }
        let n = v.norm();
        if n > 1e-10 * (nxy as f64).sqrt() {
            basis.push(v / n);
        }
    }
    basis
}

/// Directions of the reduced space along which the feasible region is flat,
/// found as principal directions between `col(Q)` and the forced-constraint
/// span with cosine within `FIXED_DIRECTION_TOL` of 1.
fn fixed_directions(red: &ReducedObjective) -> Vec<DVector<f64>> {
    let normals = forced_constraint_normals(red.n_x(), red.n_y(), red.n_p());
    let n_u = red.n_u();
    let mut m = DMatrix::<f64>::zeros(n_u, normals.len());
    for (c, nvec) in normals.iter().enumerate() {
        m.column_mut(c).copy_from(&(red.q().transpose() * nvec));
    }
    let svd = m.svd(true, false);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let mut out = Vec::new();
    for (l, &sigma) in svd.singular_values.iter().enumerate() {
        if sigma >= 1.0 - FIXED_DIRECTION_TOL {
            out.push(u.column(l).clone_owned());
        }
    }
    out
}

/// Orthonormal complement of a set of orthonormal directions in `R^{n_u}`.
fn complement_basis(n_u: usize, fixed: &[DVector<f64>]) -> DMatrix<f64> {
    if fixed.is_empty() {
        return DMatrix::identity(n_u, n_u);
    }
    let mut projector = DMatrix::<f64>::identity(n_u, n_u);
    for a in fixed {
        projector -= a * a.transpose();
    }
    let eig = projector.symmetric_eigen();
    let mut cols: Vec<(usize, f64)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &l)| (i, l))
        .collect();
    cols.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep: Vec<DVector<f64>> = cols
        .iter()
        .filter(|&&(_, l)| l > 0.5)
        .map(|&(i, _)| eig.eigenvectors.column(i).clone_owned())
        .collect();
    if keep.is_empty() {
        DMatrix::zeros(n_u, 0)
    } else {
        DMatrix::from_columns(&keep)
    }
}

/// Greedy affinely-independent subset: picks `target` points spanning the
/// candidate set's affine hull, maximizing the residual at each step.
fn greedy_affine_subset(points: &[DVector<f64>], target: usize) -> Option<Vec<usize>> {
    if points.is_empty() || target == 0 {
        return None;
    }
    let n = points.len();
    let mean = points.iter().fold(DVector::zeros(points[0].len()), |a, p| a + p) / n as f64;
    let anchor = (0..n)
        .max_by(|&a, &b| {
            (points[a].clone() - &mean)
                .norm()
                .total_cmp(&(points[b].clone() - &mean).norm())
                .then(b.cmp(&a))
        })
        .unwrap();
    let scale = points
        .iter()
        .map(|p| (p - &points[anchor]).norm())
        .fold(0.0f64, f64::max);
    if scale == 0.0 {
        return if target == 1 { Some(vec![anchor]) } else { None };
    }

    let mut chosen = vec![anchor];
    let mut basis: Vec<DVector<f64>> = Vec::new();
    while chosen.len() < target {
        let mut best: Option<(usize, f64)> = None;
        for k in 0..n {
            if chosen.contains(&k) {
                continue;
            }
            let mut v = points[k].clone() - &points[anchor];
            for b in &basis {
                let c = b.dot(&v);
                v -= b * c;
            }
            let r = v.norm();
            if best.map_or(true, |(_, br)| r > br) {
                best = Some((k, r));
            }
        }
        match best {
            Some((k, r)) if r > AFFINE_RANK_TOL * scale => {
                let mut v = points[k].clone() - &points[anchor];
                for b in &basis {
                    let c = b.dot(&v);
                    v -= b * c;
                }
                basis.push(v.normalize());
                chosen.push(k);
            }
            _ => return None,
        }
    }
    Some(chosen)
}

/// Translates the coordinate system to an interior point of the feasible
/// region.
///
/// Solves one linear assignment problem per axis direction plus one for the
/// all-negative direction, takes the centroid of the resulting vertices as
/// the new origin, and installs the frame in the reduction. When the
/// cardinality pins some directions of the reduced space (`n_p = n_x` or
/// `n_p = n_y`), the frame also restricts to the affine hull so the simplex
/// is full-dimensional in the coordinates the optimizer uses.
pub fn translate_coordinates(
    red: &mut ReducedObjective,
    config: &SolverConfig,
) -> Result<(DVector<f64>, Vec<DVector<f64>>, Vec<AssignmentSolution>)> {
    let n_u = red.n_u();

    let mut pool_points: Vec<DVector<f64>> = Vec::new();
    let mut pool_witnesses: Vec<AssignmentSolution> = Vec::new();
    let solve_direction = |d: &DVector<f64>,
                               pool_points: &mut Vec<DVector<f64>>,
                               pool_witnesses: &mut Vec<AssignmentSolution>|
     -> Result<()> {
        let (u_prime, sol) = maximize_over_feasible(red, d)?;
        pool_points.push(u_prime);
        pool_witnesses.push(sol);
        Ok(())
    };

    for i in 0..n_u {
        let mut e = DVector::zeros(n_u);
        e[i] = 1.0;
        solve_direction(&e, &mut pool_points, &mut pool_witnesses)?;
    }
    solve_direction(
        &DVector::from_element(n_u, -1.0),
        &mut pool_points,
        &mut pool_witnesses,
    )?;

    let fixed = fixed_directions(red);
    let basis = complement_basis(n_u, &fixed);
    let dim = basis.ncols();
    if dim == 0 {
        return Err(Error::DegenerateFeasibleRegion(
            "feasible region is a single point in the reduced space".into(),
        ));
    }
    if !fixed.is_empty() {
        log::debug!(
            "feasible region confined to a {dim}-dimensional affine subspace of R^{n_u}"
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x7261_6e64_6f6d_6873);
    let mut restricted: Vec<DVector<f64>> =
        pool_points.iter().map(|p| basis.transpose() * p).collect();
    let mut chosen = greedy_affine_subset(&restricted, dim + 1);
    let mut retries = 0;
    while chosen.is_none() && retries < MAX_DIRECTION_RETRIES {
        retries += 1;
        for _ in 0..=dim {
            let g = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
            if g.norm() == 0.0 {
                continue;
            }
            let lifted = &basis * (g.normalize());
            solve_direction(&lifted, &mut pool_points, &mut pool_witnesses)?;
        }
        restricted = pool_points.iter().map(|p| basis.transpose() * p).collect();
        chosen = greedy_affine_subset(&restricted, dim + 1);
    }
    let chosen = chosen.ok_or_else(|| {
        Error::DegenerateFeasibleRegion(format!(
            "could not find {} affinely independent feasible vertices after {retries} retries",
            dim + 1
        ))
    })?;

    let v0 = chosen
        .iter()
        .fold(DVector::zeros(n_u), |a, &k| a + &pool_points[k])
        / chosen.len() as f64;
    red.set_frame(v0.clone(), basis.clone())?;

    // Interior validity: the reconstructed matrix at the new origin must be
    // positive definite, else the whole construction is unusable.
    red.energy_shifted(&DVector::zeros(dim)).map_err(|_| {
        Error::InteriorPointInvalid(
            "reconstructed matrix at the feasible centroid is not positive definite".into(),
        )
    })?;

    let vertices: Vec<DVector<f64>> = chosen
        .iter()
        .map(|&k| basis.transpose() * (&pool_points[k] - &v0))
        .collect();
    let witnesses: Vec<AssignmentSolution> =
        chosen.iter().map(|&k| pool_witnesses[k].clone()).collect();
    Ok((v0, vertices, witnesses))
}

/// Runs the full pipeline and returns only the result.
pub fn run_inner_approximation(
    model: &PointSet,
    scene: &PointSet,
    kind: ModelKind,
    n_p: usize,
    config: &SolverConfig,
) -> Result<SolverResult> {
    run_detailed(model, scene, kind, n_p, config).map(|d| d.result)
}

/// Runs the full pipeline, keeping the reduction and diagnostics.
pub fn run_detailed(
    model: &PointSet,
    scene: &PointSet,
    kind: ModelKind,
    n_p: usize,
    config: &SolverConfig,
) -> Result<DetailedSolve> {
    if config.eps0 <= 0.0 {
        return Err(Error::InvalidInput("eps0 must be positive".into()));
    }
    if config.max_iterations < 1 {
        return Err(Error::InvalidInput("max_iterations must be ≥ 1".into()));
    }

    let mut red = build_reduction(model, scene, kind, n_p)?;
    let (_v0, vertices, witnesses) = translate_coordinates(&mut red, config)?;
    let dim = red.effective_dim();
    let eps = dim as f64 * config.eps0;
    let mut lap_solves = witnesses.len();

    let mut incumbent: Option<(f64, CorrespondenceVector)> = None;
    for w in &witnesses {
        consider_witness(&red, &w.pairs, &mut incumbent);
    }
    let (mut best_energy, _) = incumbent.clone().ok_or_else(|| {
        Error::DegenerateConfiguration(
            "no initial feasible vertex has a positive definite normal matrix".into(),
        )
    })?;

    let mut degenerate_insertions = 0usize;
    let mut extended: Vec<DVector<f64>> = Vec::with_capacity(vertices.len());
    for v in &vertices {
        let theta = match gamma_extension(&red, v, best_energy) {
            Ok(t) => t,
            Err(Error::NotExtendable(_)) => 1.0,
            Err(e) => return Err(e),
        };
        let vt = v * theta;
        if red.energy_shifted(&vt).is_err() {
            degenerate_insertions += 1;
            log::warn!("initial vertex extension left the concavity region; keeping it anyway");
        }
        extended.push(vt);
    }

    let mut state = PolytopeState::init_simplex(&extended)?;
    let mut history = vec![best_energy];
    let mut iterations = 0usize;
    let status;
    let certificate;

    loop {
        for idx in 0..state.polar_vertices().len() {
            if state.polar_vertices()[idx].cache.is_some() {
                continue;
            }
            let d = state.polar_vertices()[idx].d.clone();
            let (u, sol) = maximize_over_feasible(&red, &d)?;
            lap_solves += 1;
            let mu = d.dot(&u);
            consider_witness(&red, &sol.pairs, &mut incumbent);
            state.polar_vertices_mut()[idx].cache = Some(FacetCache {
                mu,
                u,
                witness: sol,
            });
        }
        best_energy = incumbent.as_ref().map(|(e, _)| *e).unwrap_or(best_energy);
        history.push(best_energy);

        let (j_star, max_mu) = state
            .polar_vertices()
            .iter()
            .enumerate()
            .map(|(i, pv)| (i, pv.cache.as_ref().expect("all facets cached").mu))
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (i, mu)| {
                if mu > acc.1 {
                    (i, mu)
                } else {
                    acc
                }
            });
        log::debug!(
            "round {iterations}: {} facets, max μ = {max_mu:.6}, incumbent E = {best_energy:.6e}",
            state.polar_vertices().len()
        );

        if max_mu <= 1.0 + eps {
            status = SolverStatus::Converged;
            certificate = max_mu - 1.0;
            break;
        }
        if iterations >= config.max_iterations {
            status = SolverStatus::IterationCap;
            certificate = max_mu - 1.0;
            break;
        }

        let cache = state.polar_vertices()[j_star]
            .cache
            .clone()
            .expect("selected facet cached");
        let z = cache.u;
        let gamma = best_energy;
        let theta = match gamma_extension(&red, &z, gamma) {
            Ok(t) => t,
            Err(Error::NotExtendable(_)) => 1.0,
            Err(e) => return Err(e),
        };
        let z_tilde = &z * theta;
        if red.energy_shifted(&z_tilde).is_err() {
            degenerate_insertions += 1;
            log::warn!("cut point lies outside the concavity region; inserting unextended");
        }
        match state.cut(&z_tilde) {
            Ok(stats) => {
                log::trace!(
                    "cut {iterations}: removed {}, added {} facets",
                    stats.removed,
                    stats.added
                );
            }
            Err(Error::NoOpCut(_)) | Err(Error::DegenerateVertex(_)) => {
                status = SolverStatus::Degenerate;
                certificate = max_mu - 1.0;
                break;
            }
            Err(e) => return Err(e),
        }
        iterations += 1;
    }

    let (energy, correspondence) = incumbent.expect("incumbent existed before the loop");
    let phi = solve_phi(kind, model, scene, correspondence.pairs())?;
    let facets: Vec<(DVector<f64>, f64)> = state
        .polar_vertices()
        .iter()
        .map(|pv| {
            let c = pv.cache.as_ref().expect("all facets cached at termination");
            (pv.d.clone(), c.mu)
        })
        .collect();

    Ok(DetailedSolve {
        result: SolverResult {
            correspondence,
            phi,
            energy,
            certificate_eps: certificate,
            iterations,
            status,
        },
        reduction: red,
        trace: SolveTrace {
            facets,
            incumbent_history: history,
            degenerate_insertions,
            lap_solves,
            n_u: 0,
            effective_dim: dim,
        },
    })
    .map(|mut d| {
        d.trace.n_u = d.reduction.n_u();
        d
    })
}

/// Exact global-minimum oracle: enumerates every vertex of the
/// correspondence polytope and evaluates each by an independent stacked
/// least-squares solve (pseudo-inverse semantics, so rank-deficient
/// configurations still evaluate).
pub fn brute_force_register(
    model: &PointSet,
    scene: &PointSet,
    kind: ModelKind,
    n_p: usize,
) -> Result<SolverResult> {
    let (n_x, n_y) = (model.len(), scene.len());
    if model.dim() != kind.n_dim() || scene.dim() != kind.n_dim() {
        return Err(Error::DimensionMismatch(format!(
            "{kind} expects {}-dimensional point sets",
            kind.n_dim()
        )));
    }
    if n_p < 1 || n_p > n_x.min(n_y) {
        return Err(Error::InfeasibleCardinality(format!(
            "n_p = {n_p} outside 1..={}",
            n_x.min(n_y)
        )));
    }

    let mut count = 1.0f64;
    // C(n_x, n_p) · C(n_y, n_p) · n_p!
    for t in 0..n_p {
        count *= (n_x - t) as f64 / (t + 1) as f64;
    }
    for t in 0..n_p {
        count *= (n_y - t) as f64;
    }
    if count > 1e5 {
        return Err(Error::OracleTooLarge(format!(
            "{count:.3e} feasible vertices exceed the 1e5 enumeration guard"
        )));
    }

    let n_d = kind.n_dim();
    let n_phi = kind.n_phi();
    let jacobians: Vec<DMatrix<f64>> = (0..n_x)
        .map(|i| jacobian(kind, &model.point(i)))
        .collect::<Result<_>>()?;

    let mut best: Option<(f64, Vec<(usize, usize)>, DVector<f64>)> = None;
    let mut rows: Vec<usize> = Vec::with_capacity(n_p);
    let mut cols: Vec<usize> = Vec::with_capacity(n_p);
    let mut visited = 0usize;

    fn evaluate(
        jacobians: &[DMatrix<f64>],
        scene: &PointSet,
        rows: &[usize],
        cols: &[usize],
        n_d: usize,
        n_phi: usize,
    ) -> (f64, DVector<f64>) {
        let m = rows.len();
        let mut a = DMatrix::<f64>::zeros(n_d * m, n_phi);
        let mut b = DVector::<f64>::zeros(n_d * m);
        for (t, (&i, &j)) in rows.iter().zip(cols.iter()).enumerate() {
            a.view_mut((t * n_d, 0), (n_d, n_phi)).copy_from(&jacobians[i]);
            b.rows_mut(t * n_d, n_d).copy_from(&scene.point(j));
        }
        let svd = a.clone().svd(true, true);
        let phi = svd.solve(&b, 1e-12).expect("SVD solve");
        let energy = (&b - &a * &phi).norm_squared();
        (energy, phi)
    }

    fn recurse_cols(
        jacobians: &[DMatrix<f64>],
        scene: &PointSet,
        rows: &[usize],
        cols: &mut Vec<usize>,
        used: &mut Vec<bool>,
        n_d: usize,
        n_phi: usize,
        best: &mut Option<(f64, Vec<(usize, usize)>, DVector<f64>)>,
        visited: &mut usize,
    ) {
        if cols.len() == rows.len() {
            *visited += 1;
            let (energy, phi) = evaluate(jacobians, scene, rows, cols, n_d, n_phi);
            let improves = best.as_ref().map_or(true, |(be, _, _)| energy < *be);
            if improves {
                let pairs = rows.iter().cloned().zip(cols.iter().cloned()).collect();
                *best = Some((energy, pairs, phi));
            }
            return;
        }
        for j in 0..scene.len() {
            if used[j] {
                continue;
            }
            used[j] = true;
            cols.push(j);
            recurse_cols(jacobians, scene, rows, cols, used, n_d, n_phi, best, visited);
            cols.pop();
            used[j] = false;
        }
    }

    fn recurse_rows(
        jacobians: &[DMatrix<f64>],
        scene: &PointSet,
        n_x: usize,
        n_p: usize,
        start: usize,
        rows: &mut Vec<usize>,
        cols: &mut Vec<usize>,
        n_d: usize,
        n_phi: usize,
        best: &mut Option<(f64, Vec<(usize, usize)>, DVector<f64>)>,
        visited: &mut usize,
    ) {
        if rows.len() == n_p {
            let mut used = vec![false; scene.len()];
            recurse_cols(
                jacobians, scene, rows, cols, &mut used, n_d, n_phi, best, visited,
            );
            return;
        }
        for i in start..n_x {
            rows.push(i);
            recurse_rows(
                jacobians,
                scene,
                n_x,
                n_p,
                i + 1,
                rows,
                cols,
                n_d,
                n_phi,
                best,
                visited,
            );
            rows.pop();
        }
    }

    recurse_rows(
        &jacobians,
        scene,
        n_x,
        n_p,
        0,
        &mut rows,
        &mut cols,
        n_d,
        n_phi,
        &mut best,
        &mut visited,
    );

    let (energy, pairs, phi) = best.expect("at least one feasible vertex");
    let correspondence = CorrespondenceVector::new(pairs, n_x, n_y)?;
    Ok(SolverResult {
        correspondence,
        phi,
        energy,
        certificate_eps: 0.0,
        iterations: visited,
        status: SolverStatus::Converged,
    })
}
