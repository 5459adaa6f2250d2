//! Linearly parameterized transformation families.
//!
//! Each family maps a point through `T(x|φ) = J(x)·φ` where the Jacobian
//! `J(x)` depends only on the point. Keeping `T` linear in the parameter
//! vector is what makes the objective reducible, so only families of this
//! form are supported.

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for the positive-definiteness check in [`solve_phi`],
/// scaled by the largest diagonal entry of the normal matrix.
pub(crate) const DELTA_PSD_DIAG_FACTOR: f64 = 1e-10;

/// The supported transformation families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// 2D rotation + uniform scale + translation (4 parameters).
    Similarity2d,
    /// General 2D affine map (6 parameters).
    Affine2d,
    /// 3D per-axis scaling + translation (6 parameters).
    ScaleTranslate3d,
    /// 3D rotation about the z-axis + uniform xy scale + z scale +
    /// translation (6 parameters).
    ZRotScale3d,
}

impl ModelKind {
    /// Number of transformation parameters.
    pub fn n_phi(self) -> usize {
        match self {
            ModelKind::Similarity2d => 4,
            ModelKind::Affine2d => 6,
            ModelKind::ScaleTranslate3d => 6,
            ModelKind::ZRotScale3d => 6,
        }
    }

    /// Ambient point dimension.
    pub fn n_dim(self) -> usize {
        match self {
            ModelKind::Similarity2d | ModelKind::Affine2d => 2,
            ModelKind::ScaleTranslate3d | ModelKind::ZRotScale3d => 3,
        }
    }

    /// Smallest number of matches for which the summed normal matrix can be
    /// positive definite on points in general position.
    pub fn min_matches(self) -> usize {
        match self {
            ModelKind::Similarity2d => 2,
            ModelKind::Affine2d => 3,
            ModelKind::ScaleTranslate3d => 2,
            ModelKind::ZRotScale3d => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Similarity2d => "similarity2d",
            ModelKind::Affine2d => "affine2d",
            ModelKind::ScaleTranslate3d => "scale-translate3d",
            ModelKind::ZRotScale3d => "zrot-scale3d",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similarity2d" => Ok(ModelKind::Similarity2d),
            "affine2d" => Ok(ModelKind::Affine2d),
            "scale-translate3d" | "scale_translate3d" => Ok(ModelKind::ScaleTranslate3d),
            "zrot-scale3d" | "zrot_scale3d" => Ok(ModelKind::ZRotScale3d),
            other => Err(Error::InvalidInput(format!("unknown model kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// An ordered list of `n` points in `R^{n_d}`, stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    coords: DMatrix<f64>,
}

impl PointSet {
    /// Builds a point set from a column-per-point matrix.
    pub fn new(coords: DMatrix<f64>) -> Result<Self> {
        if coords.ncols() == 0 {
            return Err(Error::InvalidInput("point set is empty".into()));
        }
        let dim = coords.nrows();
        if dim != 2 && dim != 3 {
            return Err(Error::DimensionMismatch(format!(
                "points must live in R^2 or R^3, got dimension {dim}"
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite coordinate".into()));
        }
        Ok(Self { coords })
    }

    /// Builds a point set from per-point coordinate rows.
    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("point set is empty".into()));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch(
                "points have inconsistent dimensions".into(),
            ));
        }
        let coords = DMatrix::from_fn(dim, points.len(), |r, c| points[c][r]);
        Self::new(coords)
    }

    pub fn len(&self) -> usize {
        self.coords.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.coords.nrows()
    }

    /// View of the `i`-th point.
    pub fn point(&self, i: usize) -> DVectorView<'_, f64> {
        self.coords.column(i)
    }

    pub fn coords(&self) -> &DMatrix<f64> {
        &self.coords
    }

    /// Largest pairwise distance.
    pub fn diameter(&self) -> f64 {
        let n = self.len();
        let mut best = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = (self.point(i) - self.point(j)).norm();
                best = best.max(d);
            }
        }
        best
    }

    /// Axis-aligned bounding box as (lower, upper) corners.
    pub fn bounding_box(&self) -> (DVector<f64>, DVector<f64>) {
        let dim = self.dim();
        let mut lo = DVector::from_element(dim, f64::INFINITY);
        let mut hi = DVector::from_element(dim, f64::NEG_INFINITY);
        for c in self.coords.column_iter() {
            for r in 0..dim {
                lo[r] = lo[r].min(c[r]);
                hi[r] = hi[r].max(c[r]);
            }
        }
        (lo, hi)
    }
}

fn check_point_dim(kind: ModelKind, x: &DVectorView<'_, f64>) -> Result<()> {
    if x.len() != kind.n_dim() {
        return Err(Error::DimensionMismatch(format!(
            "{kind} expects points in R^{}, got R^{}",
            kind.n_dim(),
            x.len()
        )));
    }
    Ok(())
}

/// The Jacobian `J(x)` of the family at a point, shape `n_d × n_φ`.
pub fn jacobian(kind: ModelKind, x: &DVectorView<'_, f64>) -> Result<DMatrix<f64>> {
    check_point_dim(kind, x)?;
    let j = match kind {
        ModelKind::Similarity2d => DMatrix::from_row_slice(
            2,
            4,
            &[
                x[0], -x[1], 1.0, 0.0, //
                x[1], x[0], 0.0, 1.0,
            ],
        ),
        ModelKind::Affine2d => DMatrix::from_row_slice(
            2,
            6,
            &[
                x[0], x[1], 0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, x[0], x[1], 0.0, 1.0,
            ],
        ),
        ModelKind::ScaleTranslate3d => DMatrix::from_row_slice(
            3,
            6,
            &[
                x[0], 0.0, 0.0, 1.0, 0.0, 0.0, //
                0.0, x[1], 0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, x[2], 0.0, 0.0, 1.0,
            ],
        ),
        ModelKind::ZRotScale3d => DMatrix::from_row_slice(
            3,
            6,
            &[
                x[0], -x[1], 0.0, 1.0, 0.0, 0.0, //
                x[1], x[0], 0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, x[2], 0.0, 0.0, 1.0,
            ],
        ),
    };
    Ok(j)
}

/// Applies the transformation: `T(x|φ) = J(x)·φ`.
pub fn apply(kind: ModelKind, phi: &DVector<f64>, x: &DVectorView<'_, f64>) -> Result<DVector<f64>> {
    if phi.len() != kind.n_phi() {
        return Err(Error::DimensionMismatch(format!(
            "{kind} expects {} parameters, got {}",
            kind.n_phi(),
            phi.len()
        )));
    }
    Ok(jacobian(kind, x)? * phi)
}

/// Recovers `φ* = argmin_φ Σ ‖y_j − J(x_i)φ‖²` over the matched pairs by
/// solving the accumulated normal equations.
///
/// Errors with [`Error::DegenerateConfiguration`] when the normal matrix is
/// not positive definite above the scale-relative tolerance (for example, a
/// single matched point under an affine model).
pub fn solve_phi(
    kind: ModelKind,
    model: &PointSet,
    scene: &PointSet,
    pairs: &[(usize, usize)],
) -> Result<DVector<f64>> {
    if model.dim() != kind.n_dim() || scene.dim() != kind.n_dim() {
        return Err(Error::DimensionMismatch(format!(
            "{kind} expects {}-dimensional point sets",
            kind.n_dim()
        )));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty correspondence".into()));
    }
    let n_phi = kind.n_phi();
    let mut normal = DMatrix::<f64>::zeros(n_phi, n_phi);
    let mut rhs = DVector::<f64>::zeros(n_phi);
    for &(i, j) in pairs {
        if i >= model.len() || j >= scene.len() {
            return Err(Error::InvalidInput(format!(
                "correspondence pair ({i},{j}) out of range"
            )));
        }
        let jac = jacobian(kind, &model.point(i))?;
        normal += jac.transpose() * &jac;
        rhs += jac.transpose() * scene.point(j);
    }

    let max_diag = (0..n_phi).map(|d| normal[(d, d)]).fold(0.0f64, f64::max);
    if max_diag <= 0.0 {
        return Err(Error::DegenerateConfiguration(
            "normal matrix has no positive diagonal".into(),
        ));
    }
    let delta = DELTA_PSD_DIAG_FACTOR * max_diag;
    let shifted = &normal - DMatrix::identity(n_phi, n_phi) * delta;
    if shifted.cholesky().is_none() {
        return Err(Error::DegenerateConfiguration(
            "normal matrix not positive definite above tolerance".into(),
        ));
    }
    let chol = normal
        .clone()
        .cholesky()
        .ok_or_else(|| Error::DegenerateConfiguration("normal matrix not positive definite".into()))?;
    let mut phi = chol.solve(&rhs);
    // One step of iterative refinement keeps the normal-equation residual
    // within the contract even for mildly ill-conditioned configurations.
    let residual = &rhs - &normal * &phi;
    phi += chol.solve(&residual);
    let rel = (&rhs - &normal * &phi).norm() / rhs.norm().max(1e-300);
    if rel > 1e-10 {
        return Err(Error::DegenerateConfiguration(format!(
            "normal equations solved to relative residual {rel:.3e} only"
        )));
    }
    Ok(phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn random_points(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> PointSet {
        let coords = DMatrix::from_fn(dim, n, |_, _| rng.gen_range(-2.0..2.0));
        PointSet::new(coords).unwrap()
    }

    #[test]
    fn jacobian_similarity2d_matches_display() {
        let x = dv(&[1.0, 2.0]);
        let j = jacobian(ModelKind::Similarity2d, &x.as_view()).unwrap();
        let expected = DMatrix::from_row_slice(2, 4, &[1.0, -2.0, 1.0, 0.0, 2.0, 1.0, 0.0, 1.0]);
        assert_eq!(j, expected);
    }

    #[test]
    fn jacobian_similarity2d_zero_point() {
        let x = dv(&[0.0, 0.0]);
        let j = jacobian(ModelKind::Similarity2d, &x.as_view()).unwrap();
        let expected = DMatrix::from_row_slice(2, 4, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(j, expected);
    }

    #[test]
    fn jacobian_scale_translate3d_matches_display() {
        let x = dv(&[1.0, 2.0, 3.0]);
        let j = jacobian(ModelKind::ScaleTranslate3d, &x.as_view()).unwrap();
        let expected = DMatrix::from_row_slice(
            3,
            6,
            &[
                1.0, 0.0, 0.0, 1.0, 0.0, 0.0, //
                0.0, 2.0, 0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 3.0, 0.0, 0.0, 1.0,
            ],
        );
        assert_eq!(j, expected);
    }

    #[test]
    fn jacobian_zrot_scale3d_matches_display() {
        let x = dv(&[1.0, 2.0, 3.0]);
        let j = jacobian(ModelKind::ZRotScale3d, &x.as_view()).unwrap();
        let expected = DMatrix::from_row_slice(
            3,
            6,
            &[
                1.0, -2.0, 0.0, 1.0, 0.0, 0.0, //
                2.0, 1.0, 0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 3.0, 0.0, 0.0, 1.0,
            ],
        );
        assert_eq!(j, expected);
    }

    #[test]
    fn jacobian_rejects_wrong_dimension() {
        let x = dv(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            jacobian(ModelKind::Similarity2d, &x.as_view()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn apply_identity_and_rotation() {
        let x = dv(&[3.0, 4.0]);
        let id = apply(ModelKind::Similarity2d, &dv(&[1.0, 0.0, 0.0, 0.0]), &x.as_view()).unwrap();
        assert_eq!(id, dv(&[3.0, 4.0]));

        let e1 = dv(&[1.0, 0.0]);
        let rot = apply(ModelKind::Similarity2d, &dv(&[0.0, 1.0, 0.0, 0.0]), &e1.as_view()).unwrap();
        assert_eq!(rot, dv(&[0.0, 1.0]));
    }

    #[test]
    fn apply_affine2d_matches_component_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let phi = DVector::from_fn(6, |_, _| rng.gen_range(-3.0..3.0));
            let x = dv(&[rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
            let got = apply(ModelKind::Affine2d, &phi, &x.as_view()).unwrap();
            // Independent evaluation of the two scalar components.
            let want0 = phi[0] * x[0] + phi[1] * x[1] + phi[4];
            let want1 = phi[2] * x[0] + phi[3] * x[1] + phi[5];
            assert_relative_eq!(got[0], want0, max_relative = 1e-15, epsilon = 1e-15);
            assert_relative_eq!(got[1], want1, max_relative = 1e-15, epsilon = 1e-15);
        }
    }

    #[test]
    fn apply_is_linear_in_phi() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in [
            ModelKind::Similarity2d,
            ModelKind::Affine2d,
            ModelKind::ScaleTranslate3d,
            ModelKind::ZRotScale3d,
        ] {
            for _ in 0..20 {
                let x = DVector::from_fn(kind.n_dim(), |_, _| rng.gen_range(-2.0..2.0));
                let p1 = DVector::from_fn(kind.n_phi(), |_, _| rng.gen_range(-2.0..2.0));
                let p2 = DVector::from_fn(kind.n_phi(), |_, _| rng.gen_range(-2.0..2.0));
                let alpha: f64 = rng.gen_range(-2.0..2.0);
                let lhs = apply(kind, &(&p1 * alpha + &p2), &x.as_view()).unwrap();
                let rhs = apply(kind, &p1, &x.as_view()).unwrap() * alpha
                    + apply(kind, &p2, &x.as_view()).unwrap();
                assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn similarity_preserves_scaled_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let phi = dv(&[0.6, 0.8, 1.5, -2.0]);
        let scale = (phi[0] * phi[0] + phi[1] * phi[1]).sqrt();
        for _ in 0..30 {
            let a = dv(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let b = dv(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let ta = apply(ModelKind::Similarity2d, &phi, &a.as_view()).unwrap();
            let tb = apply(ModelKind::Similarity2d, &phi, &b.as_view()).unwrap();
            assert_relative_eq!((ta - tb).norm(), scale * (a - b).norm(), epsilon = 1e-10);
        }
    }

    fn exact_instance(
        kind: ModelKind,
        phi: &DVector<f64>,
        n: usize,
        seed: u64,
    ) -> (PointSet, PointSet, Vec<(usize, usize)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_points(&mut rng, kind.n_dim(), n);
        let cols: Vec<DVector<f64>> = (0..n)
            .map(|i| apply(kind, phi, &model.point(i)).unwrap())
            .collect();
        let scene = PointSet::new(DMatrix::from_columns(&cols)).unwrap();
        let pairs = (0..n).map(|i| (i, i)).collect();
        (model, scene, pairs)
    }

    #[test]
    fn solve_phi_recovers_exact_similarity() {
        let phi = dv(&[0.9, -0.3, 0.7, 1.1]);
        let (model, scene, pairs) = exact_instance(ModelKind::Similarity2d, &phi, 6, 17);
        let got = solve_phi(ModelKind::Similarity2d, &model, &scene, &pairs).unwrap();
        assert_relative_eq!(got, phi, epsilon = 1e-8);
    }

    #[test]
    fn solve_phi_single_point_affine_is_degenerate() {
        let model = PointSet::from_points(&[vec![1.0, 2.0]]).unwrap();
        let scene = PointSet::from_points(&[vec![0.5, -0.5]]).unwrap();
        assert!(matches!(
            solve_phi(ModelKind::Affine2d, &model, &scene, &[(0, 0)]),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    /// Independent oracle: stack all `J(x_i)` rows and targets and solve the
    /// tall least-squares problem with a dense SVD.
    fn stacked_lstsq(
        kind: ModelKind,
        model: &PointSet,
        scene: &PointSet,
        pairs: &[(usize, usize)],
    ) -> DVector<f64> {
        let nd = kind.n_dim();
        let mut a = DMatrix::<f64>::zeros(nd * pairs.len(), kind.n_phi());
        let mut b = DVector::<f64>::zeros(nd * pairs.len());
        for (row, &(i, j)) in pairs.iter().enumerate() {
            let jac = jacobian(kind, &model.point(i)).unwrap();
            a.view_mut((row * nd, 0), (nd, kind.n_phi())).copy_from(&jac);
            b.rows_mut(row * nd, nd).copy_from(&scene.point(j));
        }
        a.svd(true, true).solve(&b, 1e-12).unwrap()
    }

    #[test]
    fn solve_phi_matches_stacked_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for kind in [
            ModelKind::Similarity2d,
            ModelKind::Affine2d,
            ModelKind::ScaleTranslate3d,
            ModelKind::ZRotScale3d,
        ] {
            for trial in 0..10 {
                let n = 5 + trial % 3;
                let model = random_points(&mut rng, kind.n_dim(), n);
                let scene = random_points(&mut rng, kind.n_dim(), n);
                let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
                let got = solve_phi(kind, &model, &scene, &pairs).unwrap();
                let want = stacked_lstsq(kind, &model, &scene, &pairs);
                assert_relative_eq!(got, want, epsilon = 1e-8, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn solve_phi_is_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let kind = ModelKind::Similarity2d;
        let model = random_points(&mut rng, 2, 8);
        let scene = random_points(&mut rng, 2, 8);
        let pairs: Vec<(usize, usize)> = (0..8).map(|i| (i, i)).collect();
        let phi = solve_phi(kind, &model, &scene, &pairs).unwrap();
        let residual = |p: &DVector<f64>| -> f64 {
            pairs
                .iter()
                .map(|&(i, j)| {
                    (scene.point(j) - apply(kind, p, &model.point(i)).unwrap()).norm_squared()
                })
                .sum()
        };
        let base = residual(&phi);
        for _ in 0..100 {
            let mut eta = DVector::from_fn(kind.n_phi(), |_, _| rng.gen_range(-1.0..1.0));
            eta *= 1e-3 / eta.norm();
            assert!(residual(&(&phi + eta)) >= base);
        }
    }
}
