//! Outer loop: incentive and automation co-design against a plant.
//!
//! Every outer iteration applies any disturbances that fall due, lets the
//! DSOs run the inner loop from their previous state, reads the plant
//! voltages at the resulting demands, forms the hypergradient estimate and
//! moves `v_ref` one step against it.

use alloc::boxed::Box;

use alloc::vec::Vec;

use thiserror::Error;

use crate::dso::{
    incentive_payment, DsoGame, DsoProfile, GameConditioning, GameError, GameIterate, InnerLoopError, InnerLoopSettings,
};
use crate::fanout::Fanout;
use crate::grid::{linearize, GridError, GridModel, LinearizeOptions, PowerFlowOptions};
use crate::plant::{AcPlant, LinearPlant, Plant};
use crate::tso::{hypergradient, update_incentive, IncentiveState, StepSchedule, TsoError, VoltagePenalty};
use crate::Vector;

/// Where voltage "measurements" come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantMode {
    /// Nonlinear AC power flow.
    Feedback,
    /// The affine model the game analysis is built on.
    Linear,
}

/// Replaces a DSO's reactive power box at the start of an outer iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disturbance {
    pub at_outer_iter: usize,
    pub dso_index: usize,
    pub new_q_min: f64,
    pub new_q_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodesignSettings {
    pub gamma: f64,
    pub rho: f64,
    pub v_lo: f64,
    pub v_hi: f64,
    /// The penalty acts on `[v_lo + margin, v_hi - margin]`.
    pub penalty_margin: f64,
    pub eta: f64,
    pub inner_max_iter: usize,
    pub epsilon: StepSchedule,
    pub sigma: StepSchedule,
    pub v_ref_init: Vector,
    pub max_outer: usize,
    pub grad_tol: f64,
    pub mode: PlantMode,
    /// Run even when `C - gamma X~` is not positive definite.
    pub allow_ill_conditioned: bool,
    pub power_flow: PowerFlowOptions,
    pub linearize: LinearizeOptions,
}

/// Everything needed to run the co-design loop.
#[derive(Debug, Clone, PartialEq)]
pub struct CodesignProblem {
    pub grid: GridModel,
    /// Active demand at every non-slack bus.
    pub p: Vector,
    pub profiles: Vec<DsoProfile>,
    pub disturbances: Vec<Disturbance>,
    pub settings: CodesignSettings,
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    /// Reference in force during the iteration.
    pub v_ref: Vector,
    /// Plant voltages at the inner loop's output.
    pub v: Vector,
    /// Inner loop's output.
    pub xi: Vector,
    pub payments: Vector,
    pub phi_e: f64,
    pub grad_norm: f64,
    pub inner_iters: usize,
    /// Disturbances applied so far, this iteration included.
    pub disturbances_applied: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppliedDisturbance {
    pub disturbance: Disturbance,
    pub xi_before: f64,
    pub xi_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTrace {
    pub gamma: f64,
    /// Grid bus of each DSO, in DSO order.
    pub dso_buses: Vec<usize>,
    /// Plant voltages before any DSO has responded.
    pub initial_v: Vector,
    pub rows: Vec<TraceRow>,
    pub events: Vec<AppliedDisturbance>,
    /// Whether the gradient-norm stop fired before the iteration budget.
    pub converged: bool,
}

impl ScenarioTrace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodesignError {
    #[error("invalid problem: {0}")]
    Invalid(&'static str),
    #[error("DSO {index} is attached to bus {bus}, which is the slack or does not exist")]
    BadDsoBus { index: usize, bus: usize },
    #[error("disturbance targets DSO {0}, which does not exist")]
    BadDisturbance(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Tso(#[from] TsoError),
    #[error("C - gamma X~ is not positive definite (mu = {:.3e})", .0.mu)]
    IllConditioned(GameConditioning),
    #[error("plant infeasible at outer iteration {k}: {source}")]
    PlantInfeasible { k: usize, source: GridError, trace: Box<ScenarioTrace> },
    #[error("inner loop stalled at outer iteration {k} after {iterations} iterations (residual {residual:.3e})")]
    InnerLoopStall { k: usize, iterations: usize, residual: f64, trace: Box<ScenarioTrace> },
}

impl CodesignError {
    /// Trace recorded up to the failure, for errors raised mid-run.
    pub fn partial_trace(&self) -> Option<&ScenarioTrace> {
        match self {
            CodesignError::PlantInfeasible { trace, .. } | CodesignError::InnerLoopStall { trace, .. } => Some(trace),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
enum ModePlant {
    Ac(AcPlant),
    Linear(LinearPlant),
}

impl Plant for ModePlant {
    fn measure(&mut self, xi: &Vector) -> Result<Vector, GridError> {
        match self {
            ModePlant::Ac(p) => p.measure(xi),
            ModePlant::Linear(p) => p.measure(xi),
        }
    }
}

/// Replaces the box of the targeted DSO and clamps its current demand into
/// it. Returns the demand before and after.
pub fn apply_disturbance(
    game: &mut DsoGame,
    iterate: &mut GameIterate,
    d: &Disturbance,
) -> Result<AppliedDisturbance, GameError> {
    game.set_limits(d.dso_index, d.new_q_min, d.new_q_max)?;
    let xi_before = iterate.xi[d.dso_index];
    let xi_after = game.profiles()[d.dso_index].clamp(xi_before);
    iterate.xi[d.dso_index] = xi_after;
    Ok(AppliedDisturbance { disturbance: *d, xi_before, xi_after })
}

/// Stateful co-design loop; [`Codesign::step`] runs one outer iteration.
#[derive(Debug, Clone)]
pub struct Codesign {
    game: DsoGame,
    plant: ModePlant,
    state: IncentiveState,
    iterate: GameIterate,
    disturbances: Vec<Disturbance>,
    applied: usize,
    settings: CodesignSettings,
    conditioning: GameConditioning,
    trace: ScenarioTrace,
}

impl Codesign {
    /// Linearizes the grid at the base load, builds the DSO game and takes
    /// the initial measurement.
    pub fn new(problem: CodesignProblem) -> Result<Self, CodesignError> {
        let CodesignProblem { grid, p, profiles, mut disturbances, settings } = problem;
        let n = profiles.len();
        if n == 0 {
            return Err(CodesignError::Invalid("at least one DSO is required"));
        }
        if p.len() != grid.n_pq() {
            return Err(GridError::DimensionMismatch { expected: grid.n_pq(), found: p.len() }.into());
        }
        if settings.v_ref_init.len() != n {
            return Err(CodesignError::Invalid("v_ref_init must have one entry per DSO"));
        }
        if !(settings.eta > 0.0) || !(settings.grad_tol >= 0.0) || settings.inner_max_iter == 0 {
            return Err(CodesignError::Invalid("eta must be positive, grad_tol non-negative, inner_max_iter nonzero"));
        }
        if !(settings.penalty_margin >= 0.0)
            || !(settings.v_lo + settings.penalty_margin < settings.v_hi - settings.penalty_margin)
        {
            return Err(CodesignError::Invalid("penalty margin must be non-negative and leave a non-empty band"));
        }

        let mut positions = Vec::with_capacity(n);
        for (index, profile) in profiles.iter().enumerate() {
            let pos = grid.pq_position(profile.bus).ok_or(CodesignError::BadDsoBus { index, bus: profile.bus })?;
            if positions.contains(&pos) {
                return Err(CodesignError::Invalid("two DSOs share a bus"));
            }
            positions.push(pos);
        }
        if let Some(d) = disturbances.iter().find(|d| d.dso_index >= n) {
            return Err(CodesignError::BadDisturbance(d.dso_index));
        }
        disturbances.sort_by_key(|d| d.at_outer_iter);

        let full = linearize(&grid, &p, &Vector::zeros(grid.n_pq()), &settings.linearize)?;
        let sens = full.restrict(&positions, &p)?;
        let p_dso = Vector::from_iterator(n, positions.iter().map(|&pos| p[pos]));
        let game = DsoGame::new(profiles, sens, p_dso, settings.gamma)?;
        let conditioning = game.check_conditioning(settings.eta);
        if conditioning.violated() && !settings.allow_ill_conditioned {
            return Err(CodesignError::IllConditioned(conditioning));
        }

        let penalty = VoltagePenalty::new(
            settings.v_lo + settings.penalty_margin,
            settings.v_hi - settings.penalty_margin,
            settings.rho,
        )?;
        let state = IncentiveState::new(
            settings.v_ref_init.clone(),
            settings.gamma,
            penalty,
            settings.epsilon,
            settings.sigma,
        )?;

        let mut plant = match settings.mode {
            PlantMode::Feedback => ModePlant::Ac(AcPlant::new(grid, p, positions.clone(), settings.power_flow)?),
            PlantMode::Linear => ModePlant::Linear(LinearPlant::new(game.sens().clone(), game.p().clone())?),
        };
        let xi0 = Vector::from_fn(n, |i, _| game.profiles()[i].clamp(0.0));
        let mut iterate = GameIterate::new(xi0, crate::Matrix::zeros(n, n));
        let initial_v = plant.measure(&iterate.xi)?;
        iterate.v_meas = initial_v.clone();

        let trace = ScenarioTrace {
            gamma: settings.gamma,
            dso_buses: game.profiles().iter().map(|p| p.bus).collect(),
            initial_v,
            rows: Vec::new(),
            events: Vec::new(),
            converged: false,
        };
        Ok(Self { game, plant, state, iterate, disturbances, applied: 0, settings, conditioning, trace })
    }

    pub fn game(&self) -> &DsoGame {
        &self.game
    }

    pub fn state(&self) -> &IncentiveState {
        &self.state
    }

    pub fn iterate(&self) -> &GameIterate {
        &self.iterate
    }

    pub fn conditioning(&self) -> &GameConditioning {
        &self.conditioning
    }

    pub fn trace(&self) -> &ScenarioTrace {
        &self.trace
    }

    pub fn into_trace(self) -> ScenarioTrace {
        self.trace
    }

    pub fn pending_disturbances(&self) -> usize {
        self.disturbances.len() - self.applied
    }

    /// One outer iteration. On failure the error carries the trace so far.
    pub fn step<E: Fanout>(&mut self, fanout: &E) -> Result<&TraceRow, CodesignError> {
        let k = self.state.outer_iter;
        while let Some(d) = self.disturbances.get(self.applied).filter(|d| d.at_outer_iter <= k) {
            let event = apply_disturbance(&mut self.game, &mut self.iterate, d)?;
            self.trace.events.push(event);
            self.applied += 1;
        }

        let settings = InnerLoopSettings {
            eta: self.settings.eta,
            sigma: self.state.sigma_now(),
            max_iter: self.settings.inner_max_iter,
        };
        let outcome = self
            .game
            .run_inner_loop(self.iterate.clone(), &self.state.v_ref, &settings, &mut self.plant, fanout)
            .map_err(|e| match e {
                InnerLoopError::Plant(source) => {
                    CodesignError::PlantInfeasible { k, source, trace: Box::new(self.trace.clone()) }
                }
                InnerLoopError::Stall { iterations, residual, .. } => {
                    CodesignError::InnerLoopStall { k, iterations, residual, trace: Box::new(self.trace.clone()) }
                }
            })?;
        self.iterate = outcome.iterate;

        // The inner loop's last measurement was taken at the output demands.
        let v = self.iterate.v_meas.clone();
        let report = hypergradient(
            &self.state.v_ref,
            &v,
            &self.iterate.xi,
            &self.iterate.s,
            self.game.sens().x(),
            self.state.gamma,
            &self.state.penalty,
        )?;
        let gamma = self.state.gamma;
        let xi = &self.iterate.xi;
        let v_ref = &self.state.v_ref;
        let payments = Vector::from_fn(xi.len(), |i, _| incentive_payment(xi[i], v[i], v_ref[i], gamma));
        self.trace.rows.push(TraceRow {
            k,
            v_ref: v_ref.clone(),
            v,
            xi: xi.clone(),
            payments,
            phi_e: report.objective,
            grad_norm: report.grad.norm(),
            inner_iters: outcome.iterations,
            disturbances_applied: self.applied,
        });
        self.state = update_incentive(&self.state, &report);
        Ok(self.trace.rows.last().expect("row just pushed"))
    }

    /// Steps until the gradient-norm stop fires with no disturbance pending,
    /// or the iteration budget runs out.
    pub fn run<E: Fanout>(mut self, fanout: &E) -> Result<ScenarioTrace, CodesignError> {
        while self.trace.rows.len() < self.settings.max_outer {
            let grad_norm = self.step(fanout)?.grad_norm;
            if grad_norm <= self.settings.grad_tol && self.pending_disturbances() == 0 {
                self.trace.converged = true;
                break;
            }
        }
        Ok(self.trace)
    }
}

/// Builds the loop for `problem` and runs it to completion.
pub fn run_codesign<E: Fanout>(problem: CodesignProblem, fanout: &E) -> Result<ScenarioTrace, CodesignError> {
    Codesign::new(problem)?.run(fanout)
}

impl CodesignSettings {
    /// Defaults for everything except the game and band parameters.
    pub fn new(gamma: f64, rho: f64, v_lo: f64, v_hi: f64, n_dso: usize) -> Self {
        Self {
            gamma,
            rho,
            v_lo,
            v_hi,
            penalty_margin: 0.0,
            eta: 1e-3,
            inner_max_iter: 10_000,
            epsilon: StepSchedule::Constant { value: 1e-4 },
            sigma: StepSchedule::Geometric { initial: 1e-3, ratio: 0.9, floor: 1e-8 },
            v_ref_init: Vector::from_element(n_dso, 1.0),
            max_outer: 5000,
            grad_tol: 1e-6,
            mode: PlantMode::Feedback,
            allow_ill_conditioned: false,
            power_flow: PowerFlowOptions::default(),
            linearize: LinearizeOptions::default(),
        }
    }
}
