//! The expanding inner polytope, represented dually.
//!
//! The polytope `D = co{generators}` is tracked through the vertices of its
//! polar `D⁰ = {v : gᵀv ≤ 1 for every generator g}`: each polar vertex is a
//! facet normal of `D` (vertex–facet duality), carried together with the set
//! of generators active at it. Adding a generator to `D` intersects the
//! polar with one new half-space, a classical online vertex enumeration
//! step: vertices beyond the new hyperplane disappear and every cut edge
//! contributes one new vertex on the hyperplane.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};

use crate::assignment::AssignmentSolution;
use crate::error::{Error, Result};

/// Scale factor for active-set classification tolerances.
const ACTIVE_TOL_FACTOR: f64 = 1e-8;
/// Condition-number limit for the initial simplex systems.
const SIMPLEX_COND_LIMIT: f64 = 1e12;
/// Relative size of the deterministic retry perturbation applied to a cut
/// point when the cut hits a degenerate vertex.
const CUT_PERTURBATION: f64 = 1e-10;

fn activation_tol(g_norm: f64, d_norm: f64) -> f64 {
    ACTIVE_TOL_FACTOR * (1.0 + g_norm * d_norm)
}

/// Allocation-free `‖a − b‖ ≤ tol` with early exit on the first distant
/// component.
fn vectors_close(a: &DVector<f64>, b: &DVector<f64>, tol: f64) -> bool {
    let tol_sq = tol * tol;
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
        if acc > tol_sq {
            return false;
        }
    }
    acc <= tol_sq
}

/// Cached linear-maximization result for one facet.
#[derive(Debug, Clone)]
pub struct FacetCache {
    /// Exact maximum of `dᵀu` over the feasible region.
    pub mu: f64,
    /// The maximizing vertex in translated coordinates.
    pub u: DVector<f64>,
    /// Integral witness achieving the maximum.
    pub witness: AssignmentSolution,
}

/// A vertex of the polar polytope: a facet normal of `D` plus the generators
/// active at it.
#[derive(Debug, Clone)]
pub struct PolarVertex {
    /// Facet normal: the facet of `D` is `{u : dᵀu = 1}`.
    pub d: DVector<f64>,
    /// Sorted indices of the exactly `dim` generators with `gᵀd = 1`.
    pub active_set: Vec<usize>,
    /// Linear-maximization cache, filled lazily by the solver.
    pub cache: Option<FacetCache>,
}

/// Statistics of one cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutStats {
    pub removed: usize,
    pub added: usize,
    pub perturbed: bool,
}

/// The expanding polytope `D`, dually represented.
#[derive(Debug, Clone)]
pub struct PolytopeState {
    dim: usize,
    generators: Vec<DVector<f64>>,
    generator_norms: Vec<f64>,
    polar_vertices: Vec<PolarVertex>,
}

impl PolytopeState {
    /// Builds the initial simplex `D = co{v_1, …, v_{dim+1}}` from points
    /// whose hull strictly contains the origin. Each facet normal solves
    /// `Y_jᵀ d = 1` over the points other than `v_j`.
    pub fn init_simplex(vertices: &[DVector<f64>]) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::InvalidInput("no simplex vertices".into()));
        }
        let dim = vertices[0].len();
        if vertices.len() != dim + 1 {
            return Err(Error::InvalidInput(format!(
                "need {} vertices for a {dim}-dimensional simplex, got {}",
                dim + 1,
                vertices.len()
            )));
        }

        // Origin strictly inside the hull: the barycentric system
        // [V; 1ᵀ]λ = [0; 1] must have an all-positive solution.
        let mut bary = DMatrix::<f64>::zeros(dim + 1, dim + 1);
        for (c, v) in vertices.iter().enumerate() {
            bary.view_mut((0, c), (dim, 1)).copy_from(v);
            bary[(dim, c)] = 1.0;
        }
        let mut rhs = DVector::<f64>::zeros(dim + 1);
        rhs[dim] = 1.0;
        let lambda = bary
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::IllConditionedSimplex("degenerate vertex matrix".into()))?;
        if lambda.iter().any(|&l| l <= 1e-12) {
            return Err(Error::InteriorPointInvalid(
                "origin not strictly inside the initial simplex".into(),
            ));
        }

        let mut polar_vertices = Vec::with_capacity(dim + 1);
        for j in 0..=dim {
            let cols: Vec<DVector<f64>> = vertices
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != j)
                .map(|(_, v)| v.clone())
                .collect();
            let y = DMatrix::from_columns(&cols);
            let svals = y.clone().svd(false, false).singular_values;
            let smax = svals.iter().cloned().fold(0.0f64, f64::max);
            let smin = svals.iter().cloned().fold(f64::INFINITY, f64::min);
            if !(smin > 0.0) || smax / smin > SIMPLEX_COND_LIMIT {
                return Err(Error::IllConditionedSimplex(format!(
                    "facet system {j} has condition number above {SIMPLEX_COND_LIMIT:e}"
                )));
            }
            let d = y
                .transpose()
                .lu()
                .solve(&DVector::from_element(dim, 1.0))
                .ok_or_else(|| Error::IllConditionedSimplex(format!("facet system {j} singular")))?;
            let active_set: Vec<usize> = (0..=dim).filter(|&i| i != j).collect();
            polar_vertices.push(PolarVertex {
                d,
                active_set,
                cache: None,
            });
        }

        let generator_norms = vertices.iter().map(|v| v.norm()).collect();
        Ok(Self {
            dim,
            generators: vertices.to_vec(),
            generator_norms,
            polar_vertices,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn generators(&self) -> &[DVector<f64>] {
        &self.generators
    }

    pub fn polar_vertices(&self) -> &[PolarVertex] {
        &self.polar_vertices
    }

    pub fn polar_vertices_mut(&mut self) -> &mut [PolarVertex] {
        &mut self.polar_vertices
    }

    /// Whether a point satisfies every facet inequality.
    pub fn contains(&self, u: &DVector<f64>) -> bool {
        let u_norm = u.norm();
        self.polar_vertices
            .iter()
            .all(|pv| pv.d.dot(u) <= 1.0 + activation_tol(u_norm, pv.d.norm()))
    }

    /// Expands the polytope with a point outside it: `D ← co(D ∪ {z̃})`.
    ///
    /// On a degenerate intersection the cut is retried once with a
    /// deterministic inward perturbation of `z̃`, then fails hard.
    pub fn cut(&mut self, z_tilde: &DVector<f64>) -> Result<CutStats> {
        match self.try_cut(z_tilde) {
            Ok(stats) => Ok(stats),
            Err(Error::DegenerateVertex(msg)) => {
                log::warn!("degenerate cut ({msg}); retrying with perturbed point");
                let perturbed = z_tilde * (1.0 - CUT_PERTURBATION);
                let mut stats = self.try_cut(&perturbed)?;
                stats.perturbed = true;
                Ok(stats)
            }
            Err(e) => Err(e),
        }
    }

    fn try_cut(&mut self, z_tilde: &DVector<f64>) -> Result<CutStats> {
        if z_tilde.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "cut point has dimension {}, polytope is {}-dimensional",
                z_tilde.len(),
                self.dim
            )));
        }
        let z_norm = z_tilde.norm();

        // Vertices within the activation band of the cut hyperplane are kept
        // conservatively: they remain valid vertices of the new polar within
        // tolerance, and candidate duplicates are removed below.
        let mut keep_mask = vec![false; self.polar_vertices.len()];
        let mut removed: Vec<usize> = Vec::new();
        let mut boundary: Vec<usize> = Vec::new();
        for (idx, pv) in self.polar_vertices.iter().enumerate() {
            let s = pv.d.dot(z_tilde);
            let tol = activation_tol(z_norm, pv.d.norm());
            if s > 1.0 + tol {
                removed.push(idx);
            } else {
                keep_mask[idx] = true;
                if (s - 1.0).abs() <= tol {
                    boundary.push(idx);
                }
            }
        }
        if removed.is_empty() {
            return Err(Error::NoOpCut("cut point already inside".into()));
        }

        let new_gen_idx = self.generators.len();

        // Adjacency = sharing dim−1 active generators. The removed side is
        // small, so index its subsets by an order-dependent hash (active
        // sets are sorted, so equal subsets hash equally) and probe from the
        // kept side without allocating keys.
        fn subset_hash(active: &[usize], skip: usize) -> u64 {
            let mut h = 0xcbf2_9ce4_8422_2325u64;
            for (pos, &g) in active.iter().enumerate() {
                if pos == skip {
                    continue;
                }
                h = (h ^ (g as u64 + 1)).wrapping_mul(0x0000_0100_0000_01b3);
            }
            h
        }
        fn subsets_equal(a: &[usize], skip_a: usize, b: &[usize], skip_b: usize) -> bool {
            let mut ia = 0;
            let mut ib = 0;
            loop {
                if ia == skip_a {
                    ia += 1;
                }
                if ib == skip_b {
                    ib += 1;
                }
                match (ia >= a.len(), ib >= b.len()) {
                    (true, true) => return true,
                    (true, false) | (false, true) => return false,
                    (false, false) => {
                        if a[ia] != b[ib] {
                            return false;
                        }
                        ia += 1;
                        ib += 1;
                    }
                }
            }
        }

        let mut cut_subsets: HashMap<u64, Vec<(usize, usize)>> = HashMap::new();
        for &c in &removed {
            let active = &self.polar_vertices[c].active_set;
            for drop in 0..active.len() {
                cut_subsets
                    .entry(subset_hash(active, drop))
                    .or_default()
                    .push((c, drop));
            }
        }

        // Crossing edges: (cut vertex, kept vertex) pairs sharing a subset.
        let mut crossing: Vec<(usize, usize)> = Vec::new(); // (cut idx, drop pos)
        for (k, pv) in self.polar_vertices.iter().enumerate() {
            if !keep_mask[k] {
                continue;
            }
            let active = &pv.active_set;
            for drop in 0..active.len() {
                let h = subset_hash(active, drop);
                let Some(entries) = cut_subsets.get(&h) else {
                    continue;
                };
                for &(c, c_drop) in entries {
                    if subsets_equal(
                        active,
                        drop,
                        &self.polar_vertices[c].active_set,
                        c_drop,
                    ) {
                        crossing.push((c, c_drop));
                    }
                }
            }
        }

        let mut new_vertices: Vec<PolarVertex> = Vec::new();
        let mut seen_active: BTreeSet<Vec<usize>> = BTreeSet::new();
        let rhs = DVector::from_element(self.dim, 1.0);
        for (c, c_drop) in crossing {
            let active = &self.polar_vertices[c].active_set;
            let mut candidate_active: Vec<usize> = active
                .iter()
                .enumerate()
                .filter(|&(pos, _)| pos != c_drop)
                .map(|(_, &g)| g)
                .collect();
            candidate_active.push(new_gen_idx);
            candidate_active.sort_unstable();
            if !seen_active.insert(candidate_active.clone()) {
                continue;
            }

            let mut system = DMatrix::<f64>::zeros(self.dim, self.dim);
            for (row, &g) in candidate_active[..self.dim - 1].iter().enumerate() {
                system.row_mut(row).copy_from(&self.generators[g].transpose());
            }
            system.row_mut(self.dim - 1).copy_from(&z_tilde.transpose());
            let Some(v) = system.lu().solve(&rhs) else {
                return Err(Error::DegenerateVertex(
                    "singular edge-crossing system".into(),
                ));
            };

            // Feasibility against every remaining inequality.
            let v_norm = v.norm();
            let feasible = self
                .generators
                .iter()
                .zip(self.generator_norms.iter())
                .all(|(g, &gn)| g.dot(&v) <= 1.0 + activation_tol(gn, v_norm));
            if !feasible {
                continue;
            }
            // An on-plane kept vertex regenerates itself through its cut
            // neighbors; drop such duplicates (and coincident candidates).
            let dup_tol = 1e-9 * (1.0 + v_norm);
            let duplicate = boundary
                .iter()
                .map(|&b| &self.polar_vertices[b].d)
                .chain(new_vertices.iter().map(|nv| &nv.d))
                .any(|w| vectors_close(w, &v, dup_tol));
            if duplicate {
                continue;
            }
            new_vertices.push(PolarVertex {
                d: v,
                active_set: candidate_active,
                cache: None,
            });
        }

        if new_vertices.is_empty() {
            return Err(Error::DegenerateVertex(
                "cut produced no replacement vertices".into(),
            ));
        }

        let stats = CutStats {
            removed: removed.len(),
            added: new_vertices.len(),
            perturbed: false,
        };
        let old = std::mem::take(&mut self.polar_vertices);
        let mut next: Vec<PolarVertex> = old
            .into_iter()
            .enumerate()
            .filter(|(idx, _)| keep_mask[*idx])
            .map(|(_, pv)| pv)
            .collect();
        next.extend(new_vertices);
        self.polar_vertices = next;
        self.generators.push(z_tilde.clone());
        self.generator_norms.push(z_norm);
        Ok(stats)
    }

    /// Re-derives every polar vertex from its active set and checks the
    /// duality invariants. Intended for tests and debugging.
    pub fn audit(&self) -> Result<()> {
        for (idx, pv) in self.polar_vertices.iter().enumerate() {
            if pv.active_set.len() != self.dim {
                return Err(Error::DegenerateVertex(format!(
                    "polar vertex {idx} has active set of size {}",
                    pv.active_set.len()
                )));
            }
            let mut system = DMatrix::<f64>::zeros(self.dim, self.dim);
            for (row, &g) in pv.active_set.iter().enumerate() {
                system.row_mut(row).copy_from(&self.generators[g].transpose());
            }
            let rhs = DVector::from_element(self.dim, 1.0);
            let solved = system
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::DegenerateVertex(format!("vertex {idx} system singular")))?;
            let err = (&solved - &pv.d).norm() / pv.d.norm().max(1e-300);
            if err > 1e-8 {
                return Err(Error::DegenerateVertex(format!(
                    "vertex {idx} fails duality audit: relative error {err:.3e}"
                )));
            }
            let d_norm = pv.d.norm();
            for (g_idx, (g, &gn)) in self
                .generators
                .iter()
                .zip(self.generator_norms.iter())
                .enumerate()
            {
                let s = g.dot(&pv.d);
                let tol = activation_tol(gn, d_norm);
                if pv.active_set.binary_search(&g_idx).is_ok() {
                    if (s - 1.0).abs() > tol {
                        return Err(Error::DegenerateVertex(format!(
                            "vertex {idx}: active generator {g_idx} has gᵀd = {s}"
                        )));
                    }
                } else if s > 1.0 + tol {
                    return Err(Error::DegenerateVertex(format!(
                        "vertex {idx}: generator {g_idx} violates gᵀd ≤ 1 (s = {s})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Brute-force vertex enumeration of `{v : gᵀv ≤ 1 for all generators}` by
/// trying every `dim`-subset of tight constraints. Reference oracle for the
/// online cut updates; exponential, keep the instance small.
pub fn polar_vertices_by_enumeration(generators: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let dim = generators[0].len();
    let mut out: Vec<DVector<f64>> = Vec::new();
    let mut subset: Vec<usize> = Vec::with_capacity(dim);

    fn recurse(
        generators: &[DVector<f64>],
        dim: usize,
        start: usize,
        subset: &mut Vec<usize>,
        out: &mut Vec<DVector<f64>>,
    ) {
        if subset.len() == dim {
            let mut system = DMatrix::<f64>::zeros(dim, dim);
            for (row, &g) in subset.iter().enumerate() {
                system.row_mut(row).copy_from(&generators[g].transpose());
            }
            if let Some(v) = system.lu().solve(&DVector::from_element(dim, 1.0)) {
                let v_norm = v.norm();
                let feasible = generators
                    .iter()
                    .all(|g| g.dot(&v) <= 1.0 + activation_tol(g.norm(), v_norm));
                if feasible && out.iter().all(|w| (w - &v).norm() > 1e-9 * (1.0 + v_norm)) {
                    out.push(v);
                }
            }
            return;
        }
        for g in start..generators.len() {
            subset.push(g);
            recurse(generators, dim, g + 1, subset, out);
            subset.pop();
        }
    }

    recurse(generators, dim, 0, &mut subset, &mut out);
    let _ = n;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    /// Random simplex vertices whose centroid is the origin.
    fn random_origin_simplex(rng: &mut ChaCha8Rng, dim: usize) -> Vec<DVector<f64>> {
        loop {
            let mut points: Vec<DVector<f64>> = (0..dim)
                .map(|_| DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let sum: DVector<f64> = points.iter().fold(DVector::zeros(dim), |a, p| a + p);
            points.push(-sum);
            if PolytopeState::init_simplex(&points).is_ok() {
                return points;
            }
        }
    }

    #[test]
    fn init_simplex_2d_worked_example() {
        let vertices = vec![dv(&[1.0, 0.0]), dv(&[0.0, 1.0]), dv(&[-1.0, -1.0])];
        let state = PolytopeState::init_simplex(&vertices).unwrap();
        assert_eq!(state.polar_vertices().len(), 3);
        // Dropping the third vertex leaves the hyperplane u₁ + u₂ = 1.
        let facet = state
            .polar_vertices()
            .iter()
            .find(|pv| pv.active_set == vec![0, 1])
            .expect("facet through v1, v2");
        assert!((facet.d.clone() - dv(&[1.0, 1.0])).norm() < 1e-12);
        state.audit().unwrap();
    }

    #[test]
    fn init_simplex_rejects_coplanar_points() {
        // All vertices on a common hyperplane through the origin.
        let vertices = vec![
            dv(&[1.0, 0.0]),
            dv(&[2.0, 0.0]),
            dv(&[-1.0, 0.0]),
        ];
        assert!(PolytopeState::init_simplex(&vertices).is_err());
    }

    #[test]
    fn init_simplex_rejects_origin_outside() {
        let vertices = vec![dv(&[1.0, 0.0]), dv(&[2.0, 0.0]), dv(&[1.0, 1.0])];
        assert!(matches!(
            PolytopeState::init_simplex(&vertices),
            Err(Error::InteriorPointInvalid(_)) | Err(Error::IllConditionedSimplex(_))
        ));
    }

    #[test]
    fn random_simplex_satisfies_facet_equalities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for dim in 2..=4 {
            let vertices = random_origin_simplex(&mut rng, dim);
            let state = PolytopeState::init_simplex(&vertices).unwrap();
            state.audit().unwrap();
            for (i, v) in vertices.iter().enumerate() {
                let mut tight = 0;
                for pv in state.polar_vertices() {
                    let s = pv.d.dot(v);
                    let tol = activation_tol(v.norm(), pv.d.norm());
                    assert!(s <= 1.0 + tol, "vertex {i} violates a facet: {s}");
                    if (s - 1.0).abs() <= tol {
                        tight += 1;
                    }
                }
                assert_eq!(tight, dim, "vertex {i} should be tight on {dim} facets");
            }
        }
    }

    #[test]
    fn cut_square_worked_example() {
        // D = co{(±1,0),(0,±1)}: polar vertices (±1,±1). The cut z̃ = (2,0)
        // removes (1,±1) and adds (½,1),(½,−1).
        let vertices = vec![dv(&[1.0, 0.0]), dv(&[0.0, 1.0]), dv(&[-0.5, -0.5])];
        let mut state = PolytopeState::init_simplex(&vertices).unwrap();
        // Grow the simplex into the square first.
        state.cut(&dv(&[-1.0, 0.0])).unwrap();
        state.cut(&dv(&[0.0, -1.0])).unwrap();
        state.audit().unwrap();
        let mut polar: Vec<Vec<i64>> = state
            .polar_vertices()
            .iter()
            .map(|pv| pv.d.iter().map(|x| (x * 2.0).round() as i64).collect())
            .collect();
        polar.sort();
        assert_eq!(
            polar,
            vec![vec![-2, -2], vec![-2, 2], vec![2, -2], vec![2, 2]],
            "square polar should be the ±1 grid (doubled for exact ints)"
        );

        let stats = state.cut(&dv(&[2.0, 0.0])).unwrap();
        assert_eq!(stats.removed, 2);
        assert_eq!(stats.added, 2);
        state.audit().unwrap();
        let mut polar: Vec<Vec<i64>> = state
            .polar_vertices()
            .iter()
            .map(|pv| pv.d.iter().map(|x| (x * 2.0).round() as i64).collect())
            .collect();
        polar.sort();
        assert_eq!(
            polar,
            vec![vec![-2, -2], vec![-2, 2], vec![1, -2], vec![1, 2]],
        );
    }

    #[test]
    fn cut_rejects_interior_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vertices = random_origin_simplex(&mut rng, 3);
        let mut state = PolytopeState::init_simplex(&vertices).unwrap();
        assert!(matches!(
            state.cut(&DVector::zeros(3)),
            Err(Error::NoOpCut(_))
        ));
    }

    #[test]
    fn cut_matches_enumeration_oracle_on_random_polytopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..60 {
            let dim = 2 + trial % 3;
            let vertices = random_origin_simplex(&mut rng, dim);
            let mut state = PolytopeState::init_simplex(&vertices).unwrap();
            let n_cuts = 1 + trial % 6;
            for _ in 0..n_cuts {
                // A point outside the polytope: scale a random direction
                // until some facet is violated.
                let mut z = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
                if z.norm() < 1e-3 {
                    continue;
                }
                let mut scale = 0.5;
                let z_final = loop {
                    scale *= 2.0;
                    let cand: DVector<f64> = &z * scale;
                    if !state.contains(&cand) {
                        break cand;
                    }
                    if scale > 1e6 {
                        break &z * 1e6;
                    }
                };
                z = z_final;
                match state.cut(&z) {
                    Ok(_) => {}
                    Err(Error::DegenerateVertex(_)) => continue,
                    Err(e) => panic!("unexpected cut failure: {e}"),
                }
                state.audit().unwrap();

                let oracle = polar_vertices_by_enumeration(state.generators());
                let got = state.polar_vertices();
                assert_eq!(
                    got.len(),
                    oracle.len(),
                    "trial {trial}: vertex count mismatch ({} vs oracle {})",
                    got.len(),
                    oracle.len()
                );
                for w in &oracle {
                    let matched = got.iter().any(|pv| (&pv.d - w).norm() <= 1e-7 * (1.0 + w.norm()));
                    assert!(matched, "trial {trial}: oracle vertex {w} missing");
                }
            }
        }
    }

    #[test]
    fn cut_strictly_expands() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vertices = random_origin_simplex(&mut rng, 3);
        let mut state = PolytopeState::init_simplex(&vertices).unwrap();
        for _ in 0..10 {
            let old_generators = state.generators().to_vec();
            let z = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)) * 5.0;
            if state.contains(&z) {
                continue;
            }
            state.cut(&z).unwrap();
            // Every previous generator still satisfies every facet.
            for g in &old_generators {
                assert!(state.contains(g));
            }
        }
    }
}
