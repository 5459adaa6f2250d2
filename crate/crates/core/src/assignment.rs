//! Exact solver for the cardinality-constrained rectangular linear
//! assignment problem.
//!
//! The feasible set is the polytope of doubly substochastic `n_x × n_y`
//! matrices with total mass exactly `k`; its vertices are partial
//! permutation matrices with `k` ones. Every linear maximization over the
//! reduced feasible region of the registration objective is one of these
//! problems.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::objective::{CorrespondenceVector, ReducedObjective};

/// Relative tolerance for reduced-cost comparisons inside the shortest-path
/// search; scaled by the largest absolute cost.
const REDUCED_COST_TOL: f64 = 1e-12;

/// Size guard for the enumeration oracle.
const ORACLE_MAX_SIDE: usize = 8;

/// A maximization instance: choose exactly `k` matches, no row or column
/// used twice, maximizing the summed cost.
#[derive(Debug, Clone)]
pub struct AssignmentProblem {
    cost: DMatrix<f64>,
    k: usize,
}

impl AssignmentProblem {
    pub fn new(cost: DMatrix<f64>, k: usize) -> Result<Self> {
        if cost.nrows() == 0 || cost.ncols() == 0 {
            return Err(Error::InvalidInput("empty cost matrix".into()));
        }
        if cost.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("non-finite cost entry".into()));
        }
        if k < 1 || k > cost.nrows().min(cost.ncols()) {
            return Err(Error::InfeasibleCardinality(format!(
                "k = {k} outside 1..={}",
                cost.nrows().min(cost.ncols())
            )));
        }
        Ok(Self { cost, k })
    }

    pub fn cost(&self) -> &DMatrix<f64> {
        &self.cost
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// An optimal vertex of the assignment polytope together with its value.
#[derive(Debug, Clone)]
pub struct AssignmentSolution {
    pub pairs: CorrespondenceVector,
    pub value: f64,
}

/// Sums cost entries over pairs in row order, so equal pair sets always
/// produce bit-identical values.
fn canonical_value(cost: &DMatrix<f64>, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[(i, j)]).sum()
}

#[derive(Clone, Copy, PartialEq)]
struct HeapKey(f64, usize);

impl Eq for HeapKey {}

impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

struct Arc {
    to: usize,
    residual: u8,
    cost: f64,
}

/// Successive-shortest-path min-cost flow on the bipartite graph with node
/// potentials. Arc costs are `max_cost − c_ij`, which keeps them
/// nonnegative; every unit of flow crosses exactly one row→column arc, so
/// the shift is a constant offset for fixed `k` and the argmax is unchanged.
struct FlowNetwork {
    adjacency: Vec<Vec<usize>>,
    arcs: Vec<Arc>,
}

impl FlowNetwork {
    fn new(n_nodes: usize) -> Self {
        Self {
            adjacency: vec![Vec::new(); n_nodes],
            arcs: Vec::new(),
        }
    }

    fn link(&mut self, from: usize, to: usize, cost: f64) {
        let id = self.arcs.len();
        self.arcs.push(Arc {
            to,
            residual: 1,
            cost,
        });
        self.arcs.push(Arc {
            to: from,
            residual: 0,
            cost: -cost,
        });
        self.adjacency[from].push(id);
        self.adjacency[to].push(id + 1);
    }
}

/// Returns a maximizer of `Σ c_ij p_ij` over partial assignments with
/// exactly `k` matches. The solution is integral (a vertex of the polytope)
/// by total unimodularity of the constraint system.
pub fn max_kcard_assignment(prob: &AssignmentProblem) -> Result<AssignmentSolution> {
    let (n_x, n_y) = (prob.cost.nrows(), prob.cost.ncols());
    let source = 0usize;
    let sink = n_x + n_y + 1;
    let row_node = |i: usize| 1 + i;
    let col_node = |j: usize| 1 + n_x + j;

    let max_cost = prob.cost.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cost_scale = prob.cost.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let tol = REDUCED_COST_TOL * cost_scale.max(1.0);

    let mut net = FlowNetwork::new(sink + 1);
    for i in 0..n_x {
        net.link(source, row_node(i), 0.0);
    }
    for i in 0..n_x {
        for j in 0..n_y {
            net.link(row_node(i), col_node(j), max_cost - prob.cost[(i, j)]);
        }
    }
    for j in 0..n_y {
        net.link(col_node(j), sink, 0.0);
    }

    let n_nodes = sink + 1;
    let mut potential = vec![0.0f64; n_nodes];
    let mut dist = vec![f64::INFINITY; n_nodes];
    let mut parent_arc = vec![usize::MAX; n_nodes];

    for _ in 0..prob.k {
        dist.fill(f64::INFINITY);
        parent_arc.fill(usize::MAX);
        dist[source] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Reverse(HeapKey(0.0, source)));
        while let Some(Reverse(HeapKey(d, u))) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &e in &net.adjacency[u] {
                if net.arcs[e].residual == 0 {
                    continue;
                }
                let v = net.arcs[e].to;
                let mut reduced = net.arcs[e].cost + potential[u] - potential[v];
                if reduced < 0.0 {
                    if reduced < -tol {
                        log::debug!("clamping reduced cost {reduced:.3e} on arc {e}");
                    }
                    reduced = 0.0;
                }
                let cand = d + reduced;
                if cand < dist[v] {
                    dist[v] = cand;
                    parent_arc[v] = e;
                    heap.push(Reverse(HeapKey(cand, v)));
                }
            }
        }
        if parent_arc[sink] == usize::MAX {
            // Unreachable for k within bounds on a complete bipartite graph.
            return Err(Error::InfeasibleCardinality(
                "no augmenting path to sink".into(),
            ));
        }
        for v in 0..n_nodes {
            if dist[v].is_finite() {
                potential[v] += dist[v];
            }
        }
        let mut v = sink;
        while v != source {
            let e = parent_arc[v];
            net.arcs[e].residual -= 1;
            net.arcs[e ^ 1].residual += 1;
            v = net.arcs[e ^ 1].to;
        }
    }

    let mut pairs = Vec::with_capacity(prob.k);
    for i in 0..n_x {
        for j in 0..n_y {
            // Row→column arcs were linked in row-major order right after the
            // n_x source arcs; each arc pair occupies two slots.
            let arc_id = 2 * (n_x + i * n_y + j);
            if net.arcs[arc_id].residual == 0 {
                pairs.push((i, j));
            }
        }
    }
    debug_assert_eq!(pairs.len(), prob.k);
    let value = canonical_value(&prob.cost, &pairs);
    let pairs = CorrespondenceVector::new(pairs, n_x, n_y)?;
    Ok(AssignmentSolution { pairs, value })
}

/// Exhaustive oracle: enumerates every k-subset of rows and every injection
/// into columns. Guarded to sides ≤ 8.
pub fn brute_force_assignment(prob: &AssignmentProblem) -> Result<AssignmentSolution> {
    let (n_x, n_y) = (prob.cost.nrows(), prob.cost.ncols());
    if n_x > ORACLE_MAX_SIDE || n_y > ORACLE_MAX_SIDE {
        return Err(Error::OracleTooLarge(format!(
            "{n_x}×{n_y} exceeds the {ORACLE_MAX_SIDE}-side enumeration guard"
        )));
    }

    let mut best_value = f64::NEG_INFINITY;
    let mut best_pairs: Option<Vec<(usize, usize)>> = None;
    let mut rows = Vec::with_capacity(prob.k);
    let mut chosen = Vec::with_capacity(prob.k);

    fn assign_columns(
        cost: &DMatrix<f64>,
        rows: &[usize],
        depth: usize,
        used: u32,
        sum: f64,
        chosen: &mut Vec<(usize, usize)>,
        best_value: &mut f64,
        best_pairs: &mut Option<Vec<(usize, usize)>>,
    ) {
        if depth == rows.len() {
            if sum > *best_value {
                *best_value = sum;
                *best_pairs = Some(chosen.clone());
            }
            return;
        }
        let i = rows[depth];
        for j in 0..cost.ncols() {
            if used & (1 << j) != 0 {
                continue;
            }
            chosen.push((i, j));
            assign_columns(
                cost,
                rows,
                depth + 1,
                used | (1 << j),
                sum + cost[(i, j)],
                chosen,
                best_value,
                best_pairs,
            );
            chosen.pop();
        }
    }

    fn pick_rows(
        cost: &DMatrix<f64>,
        k: usize,
        start: usize,
        rows: &mut Vec<usize>,
        chosen: &mut Vec<(usize, usize)>,
        best_value: &mut f64,
        best_pairs: &mut Option<Vec<(usize, usize)>>,
    ) {
        if rows.len() == k {
            assign_columns(cost, rows, 0, 0, 0.0, chosen, best_value, best_pairs);
            return;
        }
        for i in start..cost.nrows() {
            rows.push(i);
            pick_rows(cost, k, i + 1, rows, chosen, best_value, best_pairs);
            rows.pop();
        }
    }

    pick_rows(
        &prob.cost,
        prob.k,
        0,
        &mut rows,
        &mut chosen,
        &mut best_value,
        &mut best_pairs,
    );

    let pairs = best_pairs.expect("k within bounds guarantees at least one assignment");
    let value = canonical_value(&prob.cost, &pairs);
    let pairs = CorrespondenceVector::new(pairs, n_x, n_y)?;
    Ok(AssignmentSolution { pairs, value })
}

/// Maximizes `dᵀu` over the reduced feasible region by solving one linear
/// assignment problem with per-pair costs taken from the direction's image
/// in correspondence space. Returns the maximizer in translated reduced
/// coordinates together with the integral witness.
pub fn maximize_over_feasible(
    red: &ReducedObjective,
    direction: &DVector<f64>,
) -> Result<(DVector<f64>, AssignmentSolution)> {
    if direction.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite direction".into()));
    }
    let costs = red.assignment_costs(direction)?;
    let prob = AssignmentProblem::new(costs, red.n_p())?;
    let sol = max_kcard_assignment(&prob)?;
    let u = red.u_from_pairs(&sol.pairs);
    Ok((u, sol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn problem(rows: usize, cols: usize, k: usize, rng: &mut ChaCha8Rng) -> AssignmentProblem {
        let cost = DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-5.0..5.0));
        AssignmentProblem::new(cost, k).unwrap()
    }

    #[test]
    fn diagonal_dominance() {
        let cost = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let sol = max_kcard_assignment(&AssignmentProblem::new(cost.clone(), 2).unwrap()).unwrap();
        assert_eq!(sol.pairs.pairs(), &[(0, 0), (1, 1)]);
        assert_eq!(sol.value, 2.0);

        let sol1 = max_kcard_assignment(&AssignmentProblem::new(cost, 1).unwrap()).unwrap();
        assert_eq!(sol1.value, 1.0);
    }

    #[test]
    fn k_out_of_range_is_infeasible() {
        let cost = DMatrix::from_element(2, 3, 1.0);
        assert!(matches!(
            AssignmentProblem::new(cost.clone(), 0),
            Err(Error::InfeasibleCardinality(_))
        ));
        assert!(matches!(
            AssignmentProblem::new(cost, 3),
            Err(Error::InfeasibleCardinality(_))
        ));
    }

    #[test]
    fn oracle_single_cell() {
        let cost = DMatrix::from_element(1, 1, 5.0);
        let sol = brute_force_assignment(&AssignmentProblem::new(cost, 1).unwrap()).unwrap();
        assert_eq!(sol.value, 5.0);
        assert_eq!(sol.pairs.pairs(), &[(0, 0)]);
    }

    #[test]
    fn oracle_all_equal_costs() {
        let cost = DMatrix::from_element(4, 5, 0.25);
        for k in 1..=4 {
            let sol = brute_force_assignment(&AssignmentProblem::new(cost.clone(), k).unwrap())
                .unwrap();
            assert_eq!(sol.value, 0.25 * k as f64);
            let fast = max_kcard_assignment(&AssignmentProblem::new(cost.clone(), k).unwrap())
                .unwrap();
            assert_eq!(fast.value, sol.value);
        }
    }

    #[test]
    fn oracle_guard() {
        let cost = DMatrix::from_element(9, 3, 1.0);
        assert!(matches!(
            brute_force_assignment(&AssignmentProblem::new(cost, 2).unwrap()),
            Err(Error::OracleTooLarge(_))
        ));
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..200 {
            let k = 1 + trial % 5;
            let prob = problem(5, 6, k, &mut rng);
            let fast = max_kcard_assignment(&prob).unwrap();
            let slow = brute_force_assignment(&prob).unwrap();
            assert_eq!(
                fast.value, slow.value,
                "trial {trial} k={k}: {} vs {}",
                fast.value, slow.value
            );
        }
    }

    #[test]
    fn optimal_value_concave_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let values: Vec<f64> = (1..=5)
                .map(|k| {
                    let prob = problem(5, 5, k, &mut rng.clone());
                    brute_force_assignment(&prob).unwrap().value
                })
                .collect();
            for w in values.windows(3) {
                assert!(w[1] - w[0] >= w[2] - w[1] - 1e-12);
            }
            rng.gen::<u64>();
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prob = problem(6, 6, 4, &mut rng);
        let a = max_kcard_assignment(&prob).unwrap();
        let b = max_kcard_assignment(&prob).unwrap();
        assert_eq!(a.pairs.pairs(), b.pairs.pairs());
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    #[test]
    fn value_is_sum_over_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prob = problem(7, 4, 3, &mut rng);
        let sol = max_kcard_assignment(&prob).unwrap();
        let resum: f64 = sol
            .pairs
            .pairs()
            .iter()
            .map(|&(i, j)| prob.cost()[(i, j)])
            .sum();
        assert_relative_eq!(sol.value, resum);
    }

    proptest! {
        #[test]
        fn integrality_invariants(seed in 0u64..500, rows in 2usize..7, cols in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 1 + (seed as usize) % rows.min(cols);
            let prob = problem(rows, cols, k, &mut rng);
            let sol = max_kcard_assignment(&prob).unwrap();
            prop_assert_eq!(sol.pairs.len(), k);
            let mut row_used = vec![false; rows];
            let mut col_used = vec![false; cols];
            for &(i, j) in sol.pairs.pairs() {
                prop_assert!(!row_used[i] && !col_used[j]);
                row_used[i] = true;
                col_used[j] = true;
            }
        }
    }
}
