//! Ray search inside the concavity region.
//!
//! Along a ray `t·d` the reconstructed matrix is the pencil `M₀ + t·M_d`,
//! so the farthest point of the ray inside the spectrahedron is a
//! generalized eigenvalue computation rather than a general semidefinite
//! program: with `M₀ = LLᵀ`, positivity of the pencil is positivity of
//! `I + t·L⁻¹M_dL⁻ᵀ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::objective::{pd_cholesky, ReducedObjective};

/// Cap factor for rays that never leave the spectrahedron, scaled by the
/// direction norm.
pub const RAY_CAP_FACTOR: f64 = 1e6;
/// Fractional backoff from the spectrahedron boundary so extended points
/// stay strictly inside.
pub const BOUNDARY_BACKOFF: f64 = 1e-9;
/// Relative interval tolerance for the level-set bisection.
pub const BISECTION_REL_TOL: f64 = 1e-6;
/// Iteration cap for the level-set bisection.
const MAX_BISECTION_ITERS: usize = 60;

/// `sup{t ≥ 0 : m0 + t·md ≻ 0}`, capped at `cap`.
///
/// Requires `m0` positive definite; errors with
/// [`Error::InteriorPointInvalid`] otherwise.
pub fn positive_definite_ray_bound(
    m0: &DMatrix<f64>,
    md: &DMatrix<f64>,
    cap: f64,
) -> Result<f64> {
    let chol = pd_cholesky(m0).ok_or_else(|| {
        Error::InteriorPointInvalid("ray base matrix is not positive definite".into())
    })?;
    let l = chol.l();
    let y = l
        .solve_lower_triangular(md)
        .ok_or_else(|| Error::InteriorPointInvalid("singular Cholesky factor".into()))?;
    let z = l
        .solve_lower_triangular(&y.transpose())
        .ok_or_else(|| Error::InteriorPointInvalid("singular Cholesky factor".into()))?;
    // Congruence-transformed direction matrix, symmetrized against rounding.
    let n = (&z + z.transpose()) * 0.5;
    let lambda_min = n
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if lambda_min >= -1.0 / cap {
        Ok(cap)
    } else {
        Ok((-1.0 / lambda_min).min(cap))
    }
}

/// Farthest point of the ray `t·d` (translated coordinates) inside the
/// spectrahedron, capped when the ray never leaves it.
pub fn ray_boundary(red: &ReducedObjective, direction: &DVector<f64>) -> Result<f64> {
    let norm = direction.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::InvalidInput("ray direction must be nonzero".into()));
    }
    let w0 = red.w_at_shifted(&DVector::zeros(red.effective_dim()))?;
    let m0 = red.reconstruct_matrix(&red.xi2_block(&w0))?;
    let wd = red.w_of_direction(direction)?;
    let md = red.reconstruct_direction_matrix(&red.xi2_block(&wd))?;
    positive_definite_ray_bound(&m0, &md, RAY_CAP_FACTOR * norm.max(1.0))
}

/// Largest `t ∈ [lo, hi]` with `eval(t)` true, assuming `eval(lo)` holds and
/// the true set is an interval containing `lo` (concavity along the ray).
pub fn level_set_bisect(mut good: impl FnMut(f64) -> bool, lo: f64, hi: f64) -> f64 {
    let (mut lo, mut hi) = (lo, hi);
    if good(hi) {
        return hi;
    }
    let mut iters = 0;
    while hi - lo > BISECTION_REL_TOL * lo.max(1.0) && iters < MAX_BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if good(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
        iters += 1;
    }
    lo
}

/// The γ-extension factor: the largest `θ ≥ 1` with `E₂(θ·d) ≥ γ` and
/// `θ·d` inside the spectrahedron.
///
/// Errors with [`Error::NotExtendable`] when the direction itself is outside
/// the spectrahedron or already below the level; callers fall back to θ = 1.
pub fn gamma_extension(
    red: &ReducedObjective,
    direction: &DVector<f64>,
    gamma: f64,
) -> Result<f64> {
    let t0 = ray_boundary(red, direction)?;
    let energy_at = |t: f64| red.energy_shifted(&(direction * t)).ok();

    let e1 = energy_at(1.0).ok_or_else(|| {
        Error::NotExtendable("direction endpoint outside the concavity region".into())
    })?;
    if e1 < gamma - 1e-9 * gamma.abs().max(1.0) {
        return Err(Error::NotExtendable(format!(
            "energy {e1} below level {gamma} at the endpoint"
        )));
    }
    if t0 < 1.0 {
        // The endpoint itself sits numerically at the boundary.
        return Ok(1.0);
    }

    let capped = t0 >= RAY_CAP_FACTOR * direction.norm().max(1.0);
    let t_hi = if capped { t0 } else { t0 * (1.0 - BOUNDARY_BACKOFF) };
    let theta = level_set_bisect(
        |t| energy_at(t).is_some_and(|e| e >= gamma),
        1.0,
        t_hi.max(1.0),
    );
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    use crate::objective::{build_reduction, CorrespondenceVector};
    use crate::solver::translate_coordinates;
    use crate::transform::{ModelKind, PointSet};
    use crate::SolverConfig;

    fn random_points(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> PointSet {
        PointSet::new(DMatrix::from_fn(dim, n, |_, _| rng.gen_range(-2.0..2.0))).unwrap()
    }

    fn translated_instance(seed: u64) -> crate::objective::ReducedObjective {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_points(&mut rng, 2, 5);
        let scene = random_points(&mut rng, 2, 5);
        let mut red = build_reduction(&model, &scene, ModelKind::Similarity2d, 3).unwrap();
        translate_coordinates(&mut red, &SolverConfig::default()).unwrap();
        red
    }

    #[test]
    fn pencil_identity_minus_identity() {
        let m0 = DMatrix::<f64>::identity(3, 3);
        let md = -DMatrix::<f64>::identity(3, 3);
        let t0 = positive_definite_ray_bound(&m0, &md, 1e6).unwrap();
        assert_relative_eq!(t0, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn pencil_constant_direction_is_capped() {
        let m0 = DMatrix::<f64>::identity(3, 3);
        let md = DMatrix::<f64>::zeros(3, 3);
        let t0 = positive_definite_ray_bound(&m0, &md, 1e6).unwrap();
        assert_eq!(t0, 1e6);
    }

    #[test]
    fn pencil_rejects_indefinite_base() {
        let m0 = -DMatrix::<f64>::identity(2, 2);
        let md = DMatrix::<f64>::zeros(2, 2);
        assert!(matches!(
            positive_definite_ray_bound(&m0, &md, 1e6),
            Err(Error::InteriorPointInvalid(_))
        ));
    }

    #[test]
    fn ray_boundary_agrees_with_bisection_oracle() {
        let red = translated_instance(42);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let dim = red.effective_dim();
        for _ in 0..20 {
            let d = nalgebra::DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
            let t0 = ray_boundary(&red, &d).unwrap();
            if t0 >= RAY_CAP_FACTOR {
                continue;
            }
            // Independent oracle: bisection on the predicate
            // "min eigenvalue of the reconstructed matrix at t·d is positive".
            let pd_at = |t: f64| -> bool {
                let w = red.w_at_shifted(&(&d * t)).unwrap();
                let m = red.reconstruct_matrix(&red.xi2_block(&w)).unwrap();
                m.symmetric_eigen().eigenvalues.iter().all(|&l| l > 0.0)
            };
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            while pd_at(hi) {
                lo = hi;
                hi *= 2.0;
                if hi > 1e9 {
                    break;
                }
            }
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if pd_at(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            assert_relative_eq!(t0, lo, max_relative = 1e-6);

            // Boundary bracket: strictly inside just below, outside just above.
            let w_in = red.w_at_shifted(&(&d * (t0 * (1.0 - 1e-8)))).unwrap();
            let m_in = red.reconstruct_matrix(&red.xi2_block(&w_in)).unwrap();
            let min_in = m_in
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            assert!(min_in > 0.0);
            let w_out = red.w_at_shifted(&(&d * (t0 * (1.0 + 1e-6)))).unwrap();
            let m_out = red.reconstruct_matrix(&red.xi2_block(&w_out)).unwrap();
            let min_out = m_out
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            assert!(min_out < 0.0);
        }
    }

    #[test]
    fn bisect_solves_synthetic_parabola() {
        // E(t) = −(t−2)² + 4 with level γ = 3 and box [1, 10]: the upper
        // crossing sits at t = 3.
        let theta = level_set_bisect(|t| -(t - 2.0) * (t - 2.0) + 4.0 >= 3.0, 1.0, 10.0);
        assert_relative_eq!(theta, 3.0, max_relative = 1e-5);
    }

    #[test]
    fn gamma_extension_reaches_spectrahedron_when_level_is_low() {
        let red = translated_instance(44);
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let dim = red.effective_dim();
        let d = nalgebra::DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
        // Scale the direction to be well inside the spectrahedron.
        let t0 = ray_boundary(&red, &d).unwrap();
        let d = d * (t0 * 0.05);
        let gamma = -1e12;
        let theta = gamma_extension(&red, &d, gamma).unwrap();
        let t0_new = ray_boundary(&red, &d).unwrap();
        assert!(theta >= 0.99 * t0_new * (1.0 - BOUNDARY_BACKOFF));
    }

    #[test]
    fn gamma_extension_post_conditions_on_real_instance() {
        let red = translated_instance(46);
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let dim = red.effective_dim();
        for _ in 0..10 {
            let d = nalgebra::DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
            let t0 = ray_boundary(&red, &d).unwrap();
            let d = d * (t0 * 0.2);
            let e_d = red.energy_shifted(&d).unwrap();
            let e_origin = red.energy_shifted(&nalgebra::DVector::zeros(dim)).unwrap();
            let gamma = e_d.min(e_origin) - 0.1 * (e_d - e_origin).abs().max(1.0);
            let theta = gamma_extension(&red, &d, gamma).unwrap();
            assert!(theta >= 1.0);
            let e_theta = red.energy_shifted(&(&d * theta)).unwrap();
            assert!(
                e_theta >= gamma - 1e-6 * gamma.abs().max(1.0),
                "E(θd) = {e_theta} < γ = {gamma}"
            );
            // Just beyond θ the level or the spectrahedron must fail.
            let beyond = 1.05 * theta;
            let new_t0 = ray_boundary(&red, &d).unwrap();
            let still_ok = red
                .energy_shifted(&(&d * beyond))
                .map(|e| e >= gamma)
                .unwrap_or(false);
            assert!(
                !still_ok || beyond >= new_t0 * (1.0 - BOUNDARY_BACKOFF) || theta >= new_t0 * 0.99,
                "extension stopped early"
            );
        }
    }

    #[test]
    fn gamma_extension_rejects_point_below_level() {
        let red = translated_instance(48);
        let dim = red.effective_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let d = nalgebra::DVector::from_fn(dim, |_, _| rng.gen_range(-0.1..0.1));
        let e_d = red.energy_shifted(&d).unwrap();
        assert!(matches!(
            gamma_extension(&red, &d, e_d + 10.0 * e_d.abs().max(1.0)),
            Err(Error::NotExtendable(_))
        ));
    }

    #[test]
    fn feasible_vertices_lie_inside_spectrahedron() {
        let red = translated_instance(50);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..10 {
            let mut rows: Vec<usize> = (0..red.n_x()).collect();
            let mut cols: Vec<usize> = (0..red.n_y()).collect();
            rows.shuffle(&mut rng);
            cols.shuffle(&mut rng);
            let pairs: Vec<(usize, usize)> = rows[..red.n_p()]
                .iter()
                .zip(cols[..red.n_p()].iter())
                .map(|(&i, &j)| (i, j))
                .collect();
            let corr = CorrespondenceVector::new(pairs, red.n_x(), red.n_y()).unwrap();
            let u = red.u_from_pairs(&corr);
            assert!(red.energy_shifted(&u).is_ok());
        }
    }
}
