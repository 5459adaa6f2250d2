//! Globally optimal alignment of partially overlapping point sets.
//!
//! Registration is cast as a joint optimization over a partial
//! correspondence (exactly `n_p` matches between a model and a scene point
//! set) and a linearly parameterized transformation. Eliminating the
//! transformation reduces the objective to a concave function of a
//! low-dimensional variable; that function is minimized to ε-global
//! optimality by growing a polytope inside its concavity region until the
//! polytope covers the feasible set. Every linear subproblem along the way
//! is a k-cardinality linear assignment problem, solved exactly.
//!
//! Module map:
//! - [`transform`]: the transformation families, their Jacobians, and
//!   closed-form parameter recovery from a fixed correspondence.
//! - [`objective`]: the reduction of the objective to the low-dimensional
//!   variable and its evaluation.
//! - [`assignment`]: the exact cardinality-constrained assignment solver.
//! - [`geometry`]: spectrahedral ray search and polytope/polar machinery.
//! - [`solver`]: the inner approximation driver.
//! - [`bench`]: synthetic trial generation and the experiment harness.
//! - [`io`]: point-file parsing and result persistence for the CLI.

pub mod assignment;
pub mod bench;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod io;
pub mod objective;
pub mod solver;
pub mod transform;

pub use error::{Error, Result};
pub use objective::{CorrespondenceVector, ReducedObjective};
pub use solver::{SolverConfig, SolverResult, SolverStatus};
pub use transform::{ModelKind, PointSet};
