//! Error type shared by all modules of the crate.

use thiserror::Error;

/// Everything that can go wrong while building data, evaluating fields,
/// integrating characteristics or running the fixed-point solver.
#[derive(Error, Debug)]
pub enum Error {
    /// A reduced coordinate violated its domain (negative radius, r=0 with
    /// positive angular momentum where that is not representable, ...).
    #[error("invalid phase-space coordinate: {0}")]
    InvalidCoordinate(String),

    /// A scalar argument was outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A time was queried outside the interval a field table covers.
    #[error("time {t} outside the tabulated interval [{t0}, {t1}]")]
    TimeOutsideTable { t: f64, t0: f64, t1: f64 },

    /// Two field tables on different grids were combined.
    #[error("field tables live on different grids: {0}")]
    GridMismatch(String),

    /// The fixed-point iteration did not reach its tolerance.
    #[error("field iteration did not converge within {iterations} iterations (last distance {last:e}, tol {tol:e})")]
    NonConvergence {
        iterations: usize,
        last: f64,
        tol: f64,
        history: Vec<f64>,
    },

    /// A continuation guard fired: the solution is about to leave the regime
    /// the a-priori bounds control.
    #[error("blow-up guard fired at t = {t}: {reason}")]
    BlowUp {
        t: f64,
        reason: String,
        momentum_trace: Vec<(f64, f64)>,
    },

    /// An integration step could not be completed even after halving the
    /// step far below the radial floor.
    #[error("characteristic step collapsed near r = {r:e} at t = {t} (L = {l:e})")]
    StepCollapse { t: f64, r: f64, l: f64 },

    /// The steady-state shooting integration failed.
    #[error("steady-state shooting failed: {0}")]
    Shooting(String),

    /// A data file (phase-space table, snapshot) was malformed.
    #[error("malformed table file: {0}")]
    TableFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
