//! Exact analysis of finite Markov chains.
//!
//! Stationary distributions, spectra, mixing times, mutual information
//! between consecutive states and the ratio-convergence witness used to
//! check that the NCE ratio model `T(s,s')/p_{t+1}(s')` approaches its
//! stationary limit `T(s,s')/rho(s')` once the chain has mixed.
//!
//! States are indexed from 0.

mod analysis;
mod csv;
mod types;

pub use analysis::*;
pub use csv::{read_matrix_csv, write_matrix_csv, MatrixDump};
pub use types::{Distribution, RatioModel, SpectralSummary, TransitionMatrix};

use thiserror::Error;

/// Row sums and distribution totals must match 1 within this tolerance.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MarkovError {
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("chain needs at least {min} states, got {got}")]
    TooFewStates { min: usize, got: usize },
    #[error("expected {expected} entries, got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("entry ({row}, {col}) = {value} is outside [0, 1]")]
    EntryOutOfRange { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, not 1")]
    RowNotStochastic { row: usize, sum: f64 },
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("ergodicity check failed: {reason}")]
    NonErgodic { reason: String },
    #[error("eigen-solver did not converge within {iterations} iterations")]
    EigenNonConvergence { iterations: usize },
    #[error("stationary residual {residual:e} exceeds tolerance {tol:e}")]
    StationaryResidual { residual: f64, tol: f64 },
    #[error("mixing time exceeds cap {cap}; total variation still {tv:e}")]
    MixingCapExceeded { cap: usize, tv: f64 },
    #[error("epsilon must lie in {range}, got {value}")]
    InvalidEpsilon { value: f64, range: &'static str },
    #[error("marginal probability of state {state} is zero")]
    ZeroMarginal { state: usize },
    #[error(
        "ratio deviation {deviation:e} > {eps:e} at (s={s}, s'={s_next}) for t={t}"
    )]
    Prop1Violation {
        s: usize,
        s_next: usize,
        t: usize,
        deviation: f64,
        eps: f64,
    },
    #[error("malformed matrix dump: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MarkovError>;
