//! Scenario files, trace output, thread pools and the `voltgame` command
//! line around [`voltgame_core`].
//!
//! ```no_run
//! use voltgame::{load_scenario, simulate};
//! use voltgame_core::Sequential;
//!
//! let config = load_scenario("crates/voltgame/data/five_bus.scenario")?;
//! let run = simulate(&config, &Sequential)?;
//! println!("{} outer iterations", run.trace.rows.len());
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod network;
pub mod parallel;
pub mod scenario;
pub mod trace;
pub mod verify;

pub use error::{ScenarioError, TraceError, ValidationError};
pub use network::{build_five_bus, NetworkSpec};
pub use parallel::{Executor, ThreadPoolFanout};
pub use scenario::{bundled_scenario, load_scenario, ScenarioConfig};
pub use trace::{read_table, write_trace, Summary};
pub use verify::{verify_scenario, Verification};

use voltgame_core::{Codesign, CodesignError, Fanout, GameConditioning, ScenarioTrace};

/// A finished co-design run.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub trace: ScenarioTrace,
    pub conditioning: GameConditioning,
}

#[derive(Debug, thiserror::Error)]
pub enum SimulationError {
    #[error(transparent)]
    Config(#[from] ValidationError),
    #[error(transparent)]
    Run(#[from] CodesignError),
}

/// Runs the co-design loop described by `config`.
pub fn simulate<E: Fanout>(config: &ScenarioConfig, fanout: &E) -> Result<Simulation, SimulationError> {
    let codesign = Codesign::new(config.to_problem()?)?;
    let conditioning = *codesign.conditioning();
    let trace = codesign.run(fanout)?;
    Ok(Simulation { trace, conditioning })
}
