//! Concave-region and polytope machinery: ray search inside the
//! spectrahedron, level-set (γ) extension, and online vertex enumeration of
//! the polar polytope under new cuts.

mod polytope;
mod spectra;

pub use polytope::{
    polar_vertices_by_enumeration, CutStats, FacetCache, PolarVertex, PolytopeState,
};
pub use spectra::{
    gamma_extension, level_set_bisect, positive_definite_ray_bound, ray_boundary,
    BISECTION_REL_TOL, BOUNDARY_BACKOFF, RAY_CAP_FACTOR,
};
