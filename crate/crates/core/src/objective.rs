//! Reduction of the registration objective to a low-dimensional variable.
//!
//! For a fixed correspondence `P` the transformation parameters have a
//! closed-form optimum, which turns the objective into
//! `E(p) = ρᵀp − (Γp)ᵀ·mat(Ξp)⁻¹·(Γp)` over the vectorized correspondence
//! `p`. The rows of `Ξ` are highly redundant: constant rows contribute a
//! fixed `n_p`-scaled amount and symmetric/proportional duplicates carry no
//! new information, so a pruned `Ξ₂` plus a reconstruction map suffices.
//! A QR factorization of the stacked `[Ξ₂ᵀ, Γᵀ, ρ]` then compresses `p`
//! into `u′ = Qᵀp`, the variable the global optimizer actually works in.
//!
//! Vectorization is row concatenation throughout: entry `(i,j)` of a matrix
//! lands at flat index `i·n_cols + j`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::transform::{jacobian, ModelKind, PointSet};

/// Relative tolerance for classifying Ξ rows as constant or proportional.
const ROW_CLASSIFY_TOL: f64 = 1e-9;
/// Relative singular-value threshold for the rank decision in the QR step.
const QR_RANK_TOL: f64 = 1e-10;
/// Relative (trace-scaled) positive-definiteness floor for reconstructed
/// matrices.
const DELTA_PSD_TRACE_FACTOR: f64 = 1e-10;

/// Flat index of matrix entry `(i, j)` under row concatenation.
pub(crate) fn flat_index(i: usize, j: usize, n_cols: usize) -> usize {
    i * n_cols + j
}

/// A partial matching of exactly `n_p` (model, scene) index pairs; a vertex
/// of the correspondence polytope. Pairs are kept sorted by model index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrespondenceVector {
    pairs: Vec<(usize, usize)>,
}

impl CorrespondenceVector {
    pub fn new(mut pairs: Vec<(usize, usize)>, n_x: usize, n_y: usize) -> Result<Self> {
        pairs.sort_unstable();
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidInput(format!(
                    "model index {} matched twice",
                    w[0].0
                )));
            }
        }
        let mut scene: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
        scene.sort_unstable();
        for w in scene.windows(2) {
            if w[0] == w[1] {
                return Err(Error::InvalidInput(format!(
                    "scene index {} matched twice",
                    w[0]
                )));
            }
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n_x || j >= n_y) {
            return Err(Error::InvalidInput(format!(
                "pair ({i},{j}) out of bounds for {n_x}×{n_y}"
            )));
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// How one entry of the reconstructed symmetric matrix is obtained from the
/// pruned `Ξ₂` values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EntryRule {
    /// The underlying Ξ row is `c·1ᵀ`; the entry reconstructs to `c·n_p`.
    Constant(f64),
    /// The underlying row is `factor` times kept row `kept`.
    Scaled { kept: usize, factor: f64 },
}

/// Row-selection result: which rows of `Ξ` were kept, and how every entry of
/// the symmetric matrix reconstructs from them.
#[derive(Debug, Clone)]
pub struct XiRowMap {
    kept_rows: Vec<usize>,
    rules: Vec<EntryRule>,
}

impl XiRowMap {
    /// Indices (0-based, into the `n_φ²`-entry row-concatenated vec) of the
    /// kept rows.
    pub fn kept_rows(&self) -> &[usize] {
        &self.kept_rows
    }

    pub fn rules(&self) -> &[EntryRule] {
        &self.rules
    }

    pub fn n_kept(&self) -> usize {
        self.kept_rows.len()
    }
}

/// Classifies every row of the Ξ signature matrix (`n_φ² × n_x`; the row
/// pattern repeats across scene indices, so the per-model-point signature
/// carries all the information).
fn select_rows(signatures: &DMatrix<f64>) -> XiRowMap {
    let n_rows = signatures.nrows();
    let global_inf = signatures.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut kept_rows: Vec<usize> = Vec::new();
    let mut rules: Vec<EntryRule> = Vec::with_capacity(n_rows);

    for e in 0..n_rows {
        let row = signatures.row(e);
        let row_inf = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if row_inf <= ROW_CLASSIFY_TOL * global_inf.max(f64::MIN_POSITIVE) {
            rules.push(EntryRule::Constant(0.0));
            continue;
        }
        let mean = row.sum() / row.len() as f64;
        let spread = row.iter().fold(0.0f64, |a, v| a.max((v - mean).abs()));
        if spread <= ROW_CLASSIFY_TOL * row_inf {
            rules.push(EntryRule::Constant(mean));
            continue;
        }
        let mut matched = None;
        for (k, &kept) in kept_rows.iter().enumerate() {
            let kept_row = signatures.row(kept);
            let denom = kept_row.dot(&kept_row);
            let factor = row.dot(&kept_row) / denom;
            let err = (row - kept_row * factor)
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            if err <= ROW_CLASSIFY_TOL * row_inf {
                matched = Some(EntryRule::Scaled { kept: k, factor });
                break;
            }
        }
        match matched {
            Some(rule) => rules.push(rule),
            None => {
                kept_rows.push(e);
                rules.push(EntryRule::Scaled {
                    kept: kept_rows.len() - 1,
                    factor: 1.0,
                });
            }
        }
    }

    XiRowMap { kept_rows, rules }
}

/// Cholesky factor of a symmetric matrix that is positive definite above the
/// trace-relative floor, or `None`.
pub(crate) fn pd_cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    let trace = m.trace();
    if !(trace > 0.0) {
        return None;
    }
    let delta = DELTA_PSD_TRACE_FACTOR * trace / n as f64;
    let shifted = m - DMatrix::identity(n, n) * delta;
    shifted.cholesky()?;
    m.clone().cholesky()
}

/// Marker for a failed positive-definiteness check; callers map it to their
/// contract-specific error.
pub(crate) struct NotPositiveDefinite;

/// The precomputed reduction for one registration instance.
///
/// Immutable after construction apart from the coordinate frame
/// (`v0`/`basis`), which the solver sets exactly once before optimizing.
#[derive(Debug, Clone)]
pub struct ReducedObjective {
    kind: ModelKind,
    n_x: usize,
    n_y: usize,
    n_p: usize,
    rho: DVector<f64>,
    gamma: DMatrix<f64>,
    xi2: DMatrix<f64>,
    row_map: XiRowMap,
    /// Orthonormal columns, `n_x·n_y × n_u`.
    q: DMatrix<f64>,
    /// `n_u × m_total`; square upper triangular when the stacked matrix has
    /// full column rank.
    r: DMatrix<f64>,
    /// Stacked-matrix columns that were linearly dependent and therefore
    /// left out of the orthonormal basis (their components are still
    /// recovered through `r`).
    dropped_columns: Vec<usize>,
    /// Interior point of the feasible region in `u′` coordinates; zero until
    /// the solver translates the frame.
    v0: DVector<f64>,
    /// Orthonormal basis (`n_u × dim`) of the affine hull of the feasible
    /// region around `v0`; identity until the solver sets the frame.
    basis: DMatrix<f64>,
    /// `Rᵀ·v0`, the component offset of the translated frame.
    w0: DVector<f64>,
    /// `Rᵀ·basis` (`m_total × dim`): maps translated coordinates to stacked
    /// components.
    r_eff_t: DMatrix<f64>,
}

/// Builds the reduction: per-pair columns of ρ, Γ, Ξ₂, the row map, and the
/// rank-revealed QR of the stacked matrix.
pub fn build_reduction(
    model: &PointSet,
    scene: &PointSet,
    kind: ModelKind,
    n_p: usize,
) -> Result<ReducedObjective> {
    let n_d = kind.n_dim();
    if model.dim() != n_d || scene.dim() != n_d {
        return Err(Error::DimensionMismatch(format!(
            "{kind} expects {n_d}-dimensional point sets, got {}/{}",
            model.dim(),
            scene.dim()
        )));
    }
    let (n_x, n_y) = (model.len(), scene.len());
    if n_p < kind.min_matches() {
        return Err(Error::InfeasibleCardinality(format!(
            "n_p = {n_p} below the minimum {} for {kind}",
            kind.min_matches()
        )));
    }
    if n_p > n_x.min(n_y) {
        return Err(Error::InfeasibleCardinality(format!(
            "n_p = {n_p} exceeds min(n_x, n_y) = {}",
            n_x.min(n_y)
        )));
    }

    let n_phi = kind.n_phi();
    let jacobians: Vec<DMatrix<f64>> = (0..n_x)
        .map(|i| jacobian(kind, &model.point(i)))
        .collect::<Result<_>>()?;

    // Per-model-point signatures of vec(J(x)ᵀJ(x)).
    let mut signatures = DMatrix::<f64>::zeros(n_phi * n_phi, n_x);
    for (i, jac) in jacobians.iter().enumerate() {
        let jtj = jac.transpose() * jac;
        for a in 0..n_phi {
            for b in 0..n_phi {
                signatures[(flat_index(a, b, n_phi), i)] = jtj[(a, b)];
            }
        }
    }
    let row_map = select_rows(&signatures);
    let m_xi2 = row_map.n_kept();
    let m_total = m_xi2 + n_phi + 1;

    let nxy = n_x * n_y;
    let mut rho = DVector::<f64>::zeros(nxy);
    let mut gamma = DMatrix::<f64>::zeros(n_phi, nxy);
    let mut xi2 = DMatrix::<f64>::zeros(m_xi2, nxy);
    for i in 0..n_x {
        for j in 0..n_y {
            let col = flat_index(i, j, n_y);
            let y = scene.point(j);
            rho[col] = y.norm_squared();
            gamma.column_mut(col).copy_from(&(jacobians[i].transpose() * y));
            for (r, &kept) in row_map.kept_rows().iter().enumerate() {
                xi2[(r, col)] = signatures[(kept, i)];
            }
        }
    }

    // Stacked matrix [Ξ₂ᵀ, Γᵀ, ρ].
    let mut stacked = DMatrix::<f64>::zeros(nxy, m_total);
    for r in 0..m_xi2 {
        stacked.column_mut(r).copy_from(&xi2.row(r).transpose());
    }
    for a in 0..n_phi {
        stacked
            .column_mut(m_xi2 + a)
            .copy_from(&gamma.row(a).transpose());
    }
    stacked.column_mut(m_total - 1).copy_from(&rho);

    let svals = stacked.clone().svd(false, false).singular_values;
    let sigma_max = svals.iter().cloned().fold(0.0f64, f64::max);
    let rank = svals.iter().filter(|&&s| s > QR_RANK_TOL * sigma_max).count();
    if rank < n_phi + 1 {
        return Err(Error::DegenerateGeometry(format!(
            "stacked matrix rank {rank} below n_φ+1 = {}",
            n_phi + 1
        )));
    }

    let (q, r, dropped_columns) = if rank == m_total && nxy >= m_total {
        let qr = stacked.clone().qr();
        (qr.q(), qr.r(), Vec::new())
    } else {
        // Rank-deficient data: keep a maximal independent column subset in
        // original order (so the triangular structure over kept columns
        // survives) and express every stacked component over its
        // orthonormal basis.
        let mut basis_cols: Vec<DVector<f64>> = Vec::new();
        let mut dropped: Vec<usize> = Vec::new();
        for c in 0..m_total {
            let mut v = stacked.column(c).clone_owned();
            for b in &basis_cols {
                let coef = b.dot(&v);
                v -= b * coef;
            }
            // Second orthogonalization pass keeps the basis usable when a
            // column is nearly dependent.
            for b in &basis_cols {
                let coef = b.dot(&v);
                v -= b * coef;
            }
            let norm = v.norm();
            if norm > QR_RANK_TOL * sigma_max {
                basis_cols.push(v / norm);
            } else {
                dropped.push(c);
            }
        }
        let q = DMatrix::from_columns(&basis_cols);
        let r = q.transpose() * &stacked;
        (q, r, dropped)
    };

    let n_u = q.ncols();
    Ok(ReducedObjective {
        kind,
        n_x,
        n_y,
        n_p,
        rho,
        gamma,
        xi2,
        row_map,
        r_eff_t: r.transpose(),
        q,
        r,
        dropped_columns,
        v0: DVector::zeros(n_u),
        basis: DMatrix::identity(n_u, n_u),
        w0: DVector::zeros(m_total),
    })
}

impl ReducedObjective {
    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn n_p(&self) -> usize {
        self.n_p
    }

    /// Dimension of `u′` (columns of `Q`).
    pub fn n_u(&self) -> usize {
        self.q.ncols()
    }

    /// Dimension the optimizer works in: `n_u` generically, smaller when the
    /// feasible region is confined to an affine subspace.
    pub fn effective_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn m_xi2(&self) -> usize {
        self.row_map.n_kept()
    }

    /// Total stacked components: `m_Ξ₂ + n_φ + 1`.
    pub fn m_total(&self) -> usize {
        self.m_xi2() + self.kind.n_phi() + 1
    }

    pub fn row_map(&self) -> &XiRowMap {
        &self.row_map
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r_mat(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn rho(&self) -> &DVector<f64> {
        &self.rho
    }

    pub fn gamma_mat(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn xi2_mat(&self) -> &DMatrix<f64> {
        &self.xi2
    }

    pub fn dropped_columns(&self) -> &[usize] {
        &self.dropped_columns
    }

    pub fn v0(&self) -> &DVector<f64> {
        &self.v0
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Installs the translated (and possibly subspace-restricted) coordinate
    /// frame. Called once by the solver after the interior point is found.
    pub fn set_frame(&mut self, v0: DVector<f64>, basis: DMatrix<f64>) -> Result<()> {
        if v0.len() != self.n_u() || basis.nrows() != self.n_u() {
            return Err(Error::DimensionMismatch(
                "frame dimensions do not match n_u".into(),
            ));
        }
        self.w0 = self.r.transpose() * &v0;
        self.r_eff_t = self.r.transpose() * &basis;
        self.v0 = v0;
        self.basis = basis;
        Ok(())
    }

    /// Stacked components `w = [Ξ₂p; Γp; ρᵀp]` of a correspondence, summed
    /// directly from the stored columns.
    pub fn w_from_pairs(&self, corr: &CorrespondenceVector) -> Result<DVector<f64>> {
        if corr.len() != self.n_p {
            return Err(Error::InvalidInput(format!(
                "correspondence has {} pairs, expected n_p = {}",
                corr.len(),
                self.n_p
            )));
        }
        let m_xi2 = self.m_xi2();
        let n_phi = self.kind.n_phi();
        let mut w = DVector::<f64>::zeros(self.m_total());
        for &(i, j) in corr.pairs() {
            if i >= self.n_x || j >= self.n_y {
                return Err(Error::InvalidInput(format!(
                    "pair ({i},{j}) out of bounds"
                )));
            }
            let col = flat_index(i, j, self.n_y);
            for r in 0..m_xi2 {
                w[r] += self.xi2[(r, col)];
            }
            for a in 0..n_phi {
                w[m_xi2 + a] += self.gamma[(a, col)];
            }
            w[m_xi2 + n_phi] += self.rho[col];
        }
        Ok(w)
    }

    /// `u′ = Qᵀp` for an integral correspondence.
    pub fn u_prime_from_pairs(&self, corr: &CorrespondenceVector) -> DVector<f64> {
        let mut u = DVector::<f64>::zeros(self.n_u());
        for &(i, j) in corr.pairs() {
            u += self.q.row(flat_index(i, j, self.n_y)).transpose();
        }
        u
    }

    /// Translated (and restricted) coordinates of a correspondence.
    pub fn u_from_pairs(&self, corr: &CorrespondenceVector) -> DVector<f64> {
        self.basis.transpose() * (self.u_prime_from_pairs(corr) - &self.v0)
    }

    /// Per-pair assignment costs realizing `dᵀu` for a direction in
    /// translated coordinates.
    pub fn assignment_costs(&self, direction: &DVector<f64>) -> Result<DMatrix<f64>> {
        if direction.len() != self.effective_dim() {
            return Err(Error::DimensionMismatch(format!(
                "direction has length {}, expected {}",
                direction.len(),
                self.effective_dim()
            )));
        }
        let lifted = &self.basis * direction;
        let full = &self.q * lifted;
        Ok(DMatrix::from_fn(self.n_x, self.n_y, |i, j| {
            full[flat_index(i, j, self.n_y)]
        }))
    }

    fn reconstruct_with(&self, xi2_values: &DVector<f64>, constant_scale: f64) -> DMatrix<f64> {
        let n_phi = self.kind.n_phi();
        let mut m = DMatrix::<f64>::zeros(n_phi, n_phi);
        for a in 0..n_phi {
            for b in a..n_phi {
                let value = match self.row_map.rules()[flat_index(a, b, n_phi)] {
                    EntryRule::Constant(c) => c * constant_scale,
                    EntryRule::Scaled { kept, factor } => factor * xi2_values[kept],
                };
                m[(a, b)] = value;
                m[(b, a)] = value;
            }
        }
        m
    }

    /// Reconstructs the symmetric `n_φ × n_φ` matrix from pruned Ξ₂ values,
    /// scaling constant rows by `n_p`.
    pub fn reconstruct_matrix(&self, xi2_values: &DVector<f64>) -> Result<DMatrix<f64>> {
        if xi2_values.len() != self.m_xi2() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} Ξ₂ values, got {}",
                self.m_xi2(),
                xi2_values.len()
            )));
        }
        Ok(self.reconstruct_with(xi2_values, self.n_p as f64))
    }

    /// Linear part of the reconstruction: constant rows contribute nothing.
    /// This is the matrix a direction adds per unit step along a ray.
    pub fn reconstruct_direction_matrix(&self, xi2_values: &DVector<f64>) -> Result<DMatrix<f64>> {
        if xi2_values.len() != self.m_xi2() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} Ξ₂ values, got {}",
                self.m_xi2(),
                xi2_values.len()
            )));
        }
        Ok(self.reconstruct_with(xi2_values, 0.0))
    }

    pub(crate) fn energy_from_w(
        &self,
        w: &DVector<f64>,
    ) -> std::result::Result<f64, NotPositiveDefinite> {
        let m_xi2 = self.m_xi2();
        let n_phi = self.kind.n_phi();
        let xi2_values = w.rows(0, m_xi2).clone_owned();
        let mat = self.reconstruct_with(&xi2_values, self.n_p as f64);
        let chol = pd_cholesky(&mat).ok_or(NotPositiveDefinite)?;
        let g = w.rows(m_xi2, n_phi).clone_owned();
        let rho_part = w[m_xi2 + n_phi];
        Ok(rho_part - g.dot(&chol.solve(&g)))
    }

    /// Objective value of an integral correspondence through the reduction.
    pub fn energy_p(&self, corr: &CorrespondenceVector) -> Result<f64> {
        let w = self.w_from_pairs(corr)?;
        self.energy_from_w(&w).map_err(|_| {
            Error::DegenerateConfiguration(
                "mat(Ξp) not positive definite above tolerance".into(),
            )
        })
    }

    /// Objective value at a point in untranslated reduced coordinates.
    pub fn energy_u(&self, u_prime: &DVector<f64>) -> Result<f64> {
        if u_prime.len() != self.n_u() {
            return Err(Error::DimensionMismatch(format!(
                "u′ has length {}, expected {}",
                u_prime.len(),
                self.n_u()
            )));
        }
        let w = self.r.transpose() * u_prime;
        self.energy_from_w(&w).map_err(|_| {
            Error::OutsideConcavityRegion(
                "reconstructed matrix not positive definite".into(),
            )
        })
    }

    /// Objective value at a point in translated coordinates: the energy at
    /// `u + v0` (lifted through the frame basis).
    pub fn energy_shifted(&self, u: &DVector<f64>) -> Result<f64> {
        let w = self.w_at_shifted(u)?;
        self.energy_from_w(&w).map_err(|_| {
            Error::OutsideConcavityRegion(
                "reconstructed matrix not positive definite".into(),
            )
        })
    }

    /// Stacked components at a translated point.
    pub(crate) fn w_at_shifted(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.effective_dim() {
            return Err(Error::DimensionMismatch(format!(
                "u has length {}, expected {}",
                u.len(),
                self.effective_dim()
            )));
        }
        Ok(&self.w0 + &self.r_eff_t * u)
    }

    /// Component image of a translated direction (no frame offset).
    pub(crate) fn w_of_direction(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        if d.len() != self.effective_dim() {
            return Err(Error::DimensionMismatch(format!(
                "direction has length {}, expected {}",
                d.len(),
                self.effective_dim()
            )));
        }
        Ok(&self.r_eff_t * d)
    }

    /// Splits a stacked component vector into its Ξ₂ block.
    pub(crate) fn xi2_block(&self, w: &DVector<f64>) -> DVector<f64> {
        w.rows(0, self.m_xi2()).clone_owned()
    }
}
