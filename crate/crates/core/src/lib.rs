//! Conditional mean-field linear-quadratic control with partial observation
//! and Markov regime switching.
//!
//! The pipeline: sample a chain path ([`chain`]), solve the regime-coupled
//! gain equations once ([`odesolve::solve_gain_tables`]), solve the filter
//! Riccati equation along each path, then run filter and separated
//! controller in closed loop ([`sim`]).

pub mod chain;
pub mod cli;
pub mod control;
pub mod filter;
mod kernels;
pub mod model;
pub mod odesolve;
pub mod rng;
pub mod scenarios;
pub mod sim;

pub use chain::{ChainError, ChainPath, Generator};
pub use model::{AssumptionReport, ModelError, ProblemSpec};
pub use odesolve::{FilterTables, GainTables, SolveError, TimeGrid};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Scenario(#[from] scenarios::ScenarioError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
