//! Learning the solution operator `xi -> (Y, Z)` of a backward SDE.
//!
//! Terminal conditions are represented by their truncated Wiener chaos
//! coefficients over a piecewise-constant basis of `L^2([0,T]; R^d)`. The
//! forward process is the vector of chaos monomials `X_t^a`, and the operator
//! Euler scheme fits, backwards in time, one regressor per step mapping
//! `(X_{t_i}, coefficients)` to `(Y_i, Z_i)`.
//!
//! Module map:
//!
//! * [`chaos`]: Hermite polynomials, index sets, basis integrals, coefficient
//!   estimation and projection.
//! * [`simulation`]: correlated Brownian paths, the forward chaos state and
//!   its linear SDE.
//! * [`models`]: generators `g(t, y, z)` and terminal conditions.
//! * [`regression`]: least squares and a one-hidden-layer ReLU network
//!   trained with Adam.
//! * [`operator`]: coefficient boxes, training and evaluation of the operator.
//! * [`baselines`]: per-terminal reference solvers.
//! * [`experiment`]: config-driven pipelines and CSV output.

pub mod baselines;
pub mod chaos;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod grid;
pub mod models;
pub mod operator;
pub mod regression;
pub mod rng;
pub mod scheme;
pub mod simulation;
pub mod stats;

pub use error::{Error, Result};
pub use exec::Execution;
pub use grid::TimeGrid;
