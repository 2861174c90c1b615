//! Optimal control of path-dependent piecewise deterministic processes.
//!
//! A piecewise deterministic process follows a controlled ODE flow between
//! random jump times; at each jump it relocates according to a mark kernel
//! and a fresh open-loop control is chosen from the realized history. This
//! crate provides:
//!
//! - càdlàg path primitives (evaluation, stopping, concatenation, the
//!   sup-seminorm and the time/path pseudo-metric) in [`path`],
//! - problem definitions with a finite-dimensional lifted state and a
//!   statistical assumption validator in [`model`],
//! - the flow integrator, integrated hazard, survival/discount functions and
//!   exact next-jump sampling in [`flow`],
//! - event-driven trajectory simulation, jump-feedback policies and Monte
//!   Carlo cost estimation in [`sim`],
//! - the value-function fixed-point solver (one-shot and interval operators,
//!   contraction partition, backward Picard iteration, Hamiltonians, policy
//!   extraction) in [`solver`],
//! - a finite history-dependent discrete-time decision model with backward
//!   induction and exhaustive policy enumeration in [`mdp`],
//! - the verification checks (dynamic programming residuals, fixed-point
//!   residuals, contraction and Lipschitz estimates, monotone bracketing,
//!   characteristic-pair searches, the stopped-path regularity example) in
//!   [`verify`].
//!
//! Numeric code is generic over [`scalar::Scalar`] (any `num-traits` float);
//! the crate root exports `f64` aliases which the CLI and file formats use.

pub mod error;
pub mod expr;
pub mod flow;
pub mod mdp;
pub mod model;
pub mod path;
pub mod problems;
pub mod rng;
pub mod scalar;
pub mod sim;
pub mod solver;
pub mod verify;

pub use error::CoreError;
pub use scalar::Scalar;

/// Scalar type used by the CLI and the on-disk formats.
pub type Real = f64;

pub type Path64 = path::CadlagPath<Real>;
pub type Problem64 = model::ProblemData<Real>;
pub type Schedule64 = flow::Schedule<Real>;
pub type Trajectory64 = sim::Trajectory<Real>;
pub type Value64 = solver::ValueFunction<Real>;

/// Version string embedded in every output artifact.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
