//! Solver core for incentive-based reactive power procurement.
//!
//! A transmission operator (the leader) publishes a voltage reference `v_ref`
//! and a tariff `gamma`. Each distribution operator (a follower) is paid
//! `gamma * (v_i - v_ref_i) * q_i` for its reactive demand `q_i` and pays a
//! quadratic cost for providing it. The followers settle on a Nash equilibrium
//! through projected pseudo-gradient steps while learning the sensitivity of
//! that equilibrium to `v_ref`; the leader uses the sensitivity to descend a
//! hypergradient of its payments plus a voltage-band penalty.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the command line
//! and thread pools live in the `voltgame` crate.
//!
//! Module map:
//!
//! - [`grid`]: network model, Newton-Raphson AC power flow and the affine
//!   voltage model obtained by linearizing it.
//! - [`dso`]: the followers' game, the inner equilibrium/sensitivity loop and
//!   its conditioning checks.
//! - [`tso`]: the leader's penalty, objective, hypergradient and update.
//! - [`codesign`]: the outer loop that couples both against a simulated plant.
//! - [`oracle`]: closed-form and finite-difference references used to verify
//!   the iterative algorithms.

#![no_std]
// Comparisons are written as `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod codesign;
pub mod dso;
pub mod fanout;
pub mod grid;
pub mod oracle;
pub mod plant;
pub mod tso;

pub use nalgebra::{DMatrix, DVector};

/// Dense column vector of `f64`.
pub type Vector = DVector<f64>;
/// Dense matrix of `f64`.
pub type Matrix = DMatrix<f64>;

pub use codesign::{
    run_codesign, Codesign, CodesignError, CodesignProblem, CodesignSettings, Disturbance, PlantMode, ScenarioTrace,
    TraceRow,
};
pub use dso::{DsoGame, DsoProfile, GameConditioning, GameError, GameIterate, InnerLoopError, InnerLoopSettings};
pub use fanout::{Fanout, Sequential};
pub use grid::{
    GridError, GridModel, Line, LinearSensitivities, LinearizeOptions, PowerFlowOptions, PowerFlowSolution,
};
pub use oracle::{OracleError, OracleReport};
pub use plant::{AcPlant, LinearPlant, Plant};
pub use tso::{HypergradientReport, IncentiveState, StepSchedule, TsoError, VoltagePenalty};
