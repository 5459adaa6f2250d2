//! Crate-wide error type.

/// Errors produced by the registration pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input has the wrong dimension or shape.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// An input value is invalid (non-finite, empty, out of range).
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// The requested number of matches cannot be satisfied.
    #[error("infeasible cardinality: {0}")]
    InfeasibleCardinality(String),
    /// A point configuration is too degenerate to recover transformation
    /// parameters (singular or near-singular normal matrix).
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    /// The stacked reduction matrix lost rank below the usable minimum.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    /// An evaluation point fell outside the concavity region (the
    /// reconstructed matrix is not positive definite).
    #[error("outside concavity region: {0}")]
    OutsideConcavityRegion(String),
    /// A brute-force oracle was asked for an instance above its size guard.
    #[error("oracle too large: {0}")]
    OracleTooLarge(String),
    /// The interior point of the feasible region is invalid (not inside the
    /// concavity region); indicates a construction bug upstream.
    #[error("interior point invalid: {0}")]
    InteriorPointInvalid(String),
    /// A level-set extension was requested from a point that does not
    /// satisfy its preconditions; callers fall back to the unextended point.
    #[error("not extendable: {0}")]
    NotExtendable(String),
    /// The initial simplex is numerically rank-deficient.
    #[error("ill-conditioned simplex: {0}")]
    IllConditionedSimplex(String),
    /// A polytope cut was requested with a point already inside the polytope.
    #[error("no-op cut: {0}")]
    NoOpCut(String),
    /// A polar vertex came out with a malformed active set even after a
    /// perturbation retry.
    #[error("degenerate polar vertex: {0}")]
    DegenerateVertex(String),
    /// The feasible region does not span the expected subspace; the initial
    /// simplex cannot be built.
    #[error("degenerate feasible region: {0}")]
    DegenerateFeasibleRegion(String),
    /// A benchmark trial specification is invalid.
    #[error("invalid trial spec: {0}")]
    InvalidSpec(String),
    /// File or serialization failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed input file.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
