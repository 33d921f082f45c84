//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A dataset, group, or configuration that must be non-empty was empty.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// CSV header did not match the expected `y,d,x1,...,xp` schema.
    #[error("bad csv header: {0}")]
    Header(String),

    /// A CSV cell could not be parsed into the declared column type.
    /// `row` is 1-based and counts data rows (the header is row 0).
    #[error("row {row}, column '{column}': {message}")]
    Cell { row: usize, column: String, message: String },

    /// A treatment level was requested outside `0..q_levels`.
    #[error("treatment level {level} out of range for {q} levels")]
    LevelOutOfRange { level: usize, q: usize },

    /// No observation received the named treatment level.
    #[error("no observations with treatment level {level}")]
    EmptyGroup { level: usize },

    /// A model or experiment specification violated its invariants.
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    /// A feature term referenced a covariate index outside `1..=p`.
    #[error("covariate index {j} out of range (dataset has p = {p} covariates)")]
    CovariateIndex { j: usize, p: usize },

    /// A feature map contains treatment terms but no treatment level was
    /// supplied when evaluating it.
    #[error("feature map has treatment terms but no treatment level was supplied")]
    MissingTreatment,

    /// Binomial fit drifted to an unbounded maximum (separated data).
    #[error("apparent perfect separation: coefficient norm {norm:.3e} exceeds {limit:.0e}")]
    Separation { norm: f64, limit: f64 },

    /// Normal equations stayed singular even after the ridge retry.
    #[error("singular normal equations: {0}")]
    Singular(String),

    /// The outcome design matrix does not have full column rank.
    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },

    /// Fewer observations than coefficients to estimate.
    #[error("{n} observations cannot identify {terms} coefficients")]
    TooFewRows { n: usize, terms: usize },

    /// A multiplier vector left the domain where all 1 + rho'g_i > 0.
    #[error("multiplier outside the feasible domain: some 1 + rho'g_i <= 0")]
    DomainViolation,

    /// The empirical-likelihood weight solver could not produce weights.
    #[error("weight solver failed: {0}")]
    SolverFailed(String),

    /// Two estimates that must share an estimator/dataset did not.
    #[error("incompatible estimates: {0} vs {1}")]
    EstimateMismatch(String, String),

    /// An estimator name did not parse against the loaded model family.
    #[error("unknown estimator '{name}': {hint}")]
    UnknownEstimator { name: String, hint: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("model family json: {0}")]
    Json(#[from] serde_json::Error),
}
