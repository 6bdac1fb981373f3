//! Error type shared by all solver modules.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("solid inclusion touches the cell boundary (one-cell margin required)")]
    InclusionTouchesBoundary,
    #[error("pore region is not face-connected")]
    DisconnectedPore,
    #[error("epsilon = {0} is not the reciprocal of a positive integer")]
    NonUnitFractionEpsilon(f64),
    #[error("argument {0} outside the admissible domain of the potential")]
    DomainError(f64),
    #[error("invalid parameters: {0}")]
    ParamError(String),
    #[error("assumption {predicate} violated at s = {witness}")]
    AssumptionViolated { predicate: &'static str, witness: f64 },
    #[error("Newton iteration diverged after {iters} iterations (residual {residual:.3e})")]
    NewtonDivergence { iters: usize, residual: f64 },
    #[error("advective CFL number {0:.3} exceeds 1")]
    CflViolation(f64),
    #[error("linear solver stalled with residual {residual:.3e} after {iters} iterations")]
    LinearSolverStall { iters: usize, residual: f64 },
    #[error("linear system is singular (pore region disconnected?)")]
    SingularSystem,
    #[error("cell has no solid inclusion; permeability problem has no finite solution")]
    NoSolidInclusion,
    #[error("grids are misaligned: {0}")]
    MisalignedGrids(String),
    #[error("discrete energy increased by {delta:.3e} at t = {t:.6} (beyond tolerance)")]
    EnergyIncrease { t: f64, delta: f64 },
    #[error("mass drifted by {delta:.3e} at t = {t:.6} (beyond tolerance)")]
    MassDrift { t: f64, delta: f64 },
    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    ValidationError(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
