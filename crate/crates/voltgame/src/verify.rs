//! Oracle checks on a scenario's linearized game.
//!
//! Every comparison is made at the scenario's initial incentive `v_ref_init`
//! on the affine model obtained at the base load. The last check compares
//! that affine model against the AC power flow itself.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use voltgame_core::oracle::{closed_form_ne, equilibrium_sensitivity, fd_hypergradient, verify_ne, ErrorMetric};
use voltgame_core::tso::hypergradient;
use voltgame_core::{
    AcPlant, Codesign, CodesignError, DsoGame, Fanout, GameConditioning, GameIterate, InnerLoopSettings, OracleError,
    OracleReport, Plant, PlantMode, Vector, VoltagePenalty,
};

use crate::error::ValidationError;
use crate::scenario::ScenarioConfig;

/// Tolerances of the oracle suite.
pub const NE_TOL: f64 = 1e-6;
pub const SENSITIVITY_TOL: f64 = 1e-6;
pub const HYPERGRADIENT_REL_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
pub const FIDELITY_TOL: f64 = 1e-3;
pub const FIDELITY_DELTA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Config(#[from] ValidationError),
    #[error(transparent)]
    Setup(#[from] CodesignError),
    #[error("oracle failed: {0}")]
    Oracle(#[from] OracleError),
    #[error("inner loop did not converge: {0}")]
    InnerLoop(String),
}

/// Compact form of an [`OracleReport`] for the run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleDigest {
    pub quantity: String,
    pub metric: String,
    pub abs_err: f64,
    pub rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl From<&OracleReport> for OracleDigest {
    fn from(r: &OracleReport) -> Self {
        Self {
            quantity: r.quantity.clone(),
            metric: match r.metric {
                ErrorMetric::Absolute => "abs",
                ErrorMetric::Relative => "rel",
            }
            .to_string(),
            abs_err: r.abs_err,
            rel_err: r.rel_err,
            tol: r.tol,
            passed: r.passed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Verification {
    pub conditioning: GameConditioning,
    pub reports: Vec<OracleReport>,
}

impl Verification {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.passed)
    }
}

/// The scenario's game on the affine model, with the penalty the leader uses.
pub fn linear_game(config: &ScenarioConfig) -> Result<(DsoGame, VoltagePenalty, GameConditioning), VerifyError> {
    let mut problem = config.to_problem()?;
    problem.settings.mode = PlantMode::Linear;
    let codesign = Codesign::new(problem)?;
    Ok((codesign.game().clone(), codesign.state().penalty, *codesign.conditioning()))
}

/// Runs the oracle suite for `config`.
pub fn verify_scenario<E: Fanout>(config: &ScenarioConfig, fanout: &E) -> Result<Verification, VerifyError> {
    let (game, penalty, conditioning) = linear_game(config)?;
    let v_ref = Vector::from_vec(config.v_ref_init.clone());
    let n = game.n();

    let settings = InnerLoopSettings { eta: config.eta, sigma: 1e-11, max_iter: 1_000_000 };
    let start =
        GameIterate::new(Vector::from_fn(n, |i, _| game.profiles()[i].clamp(0.0)), voltgame_core::Matrix::zeros(n, n));
    let outcome = game
        .run_inner_loop(start, &v_ref, &settings, &mut game.linear_plant(), fanout)
        .map_err(|e| VerifyError::InnerLoop(e.to_string()))?;
    let it = outcome.iterate;

    let q_star = closed_form_ne(&game, &v_ref)?;
    let mut reports = vec![
        OracleReport::compare_vectors("equilibrium", &it.xi, &q_star, NE_TOL, ErrorMetric::Absolute),
        verify_ne(&game, &it.xi, &v_ref, NE_TOL),
    ];

    let s_star = equilibrium_sensitivity(&game, &q_star, &v_ref)?;
    reports.push(OracleReport::with_error(
        "sensitivity_frobenius",
        it.s.norm(),
        s_star.norm(),
        (&it.s - &s_star).norm(),
        SENSITIVITY_TOL,
        ErrorMetric::Absolute,
    ));

    let v = game.linear_voltage(&it.xi);
    let hg = hypergradient(&v_ref, &v, &it.xi, &it.s, game.sens().x(), game.gamma(), &penalty)
        .expect("dimensions agree by construction");
    let fd = fd_hypergradient(&game, &penalty, &v_ref, FD_STEP)?;
    reports.push(OracleReport::compare_vectors(
        "hypergradient",
        &hg.grad,
        &fd,
        HYPERGRADIENT_REL_TOL,
        ErrorMetric::Relative,
    ));

    reports.push(plant_fidelity(config, FIDELITY_DELTA)?);
    Ok(Verification { conditioning, reports })
}

/// Worst disagreement between the affine model and the AC power flow when
/// each DSO's reactive demand is moved by `±delta` from zero.
pub fn plant_fidelity(config: &ScenarioConfig, delta: f64) -> Result<OracleReport, VerifyError> {
    let (game, _, _) = linear_game(config)?;
    let problem = config.to_problem()?;
    let positions: Vec<usize> =
        problem.profiles.iter().map(|p| problem.grid.pq_position(p.bus).expect("validated DSO bus")).collect();
    let mut ac =
        AcPlant::new(problem.grid, problem.p, positions, problem.settings.power_flow).map_err(CodesignError::from)?;
    let n = game.n();
    let mut worst: Option<OracleReport> = None;
    for i in 0..n {
        for sign in [-1.0, 1.0] {
            let mut q = Vector::zeros(n);
            q[i] = sign * delta;
            let v_ac = ac.measure(&q).map_err(CodesignError::from)?;
            let v_lin = game.linear_voltage(&q);
            let r = OracleReport::compare_vectors("plant_fidelity", &v_lin, &v_ac, FIDELITY_TOL, ErrorMetric::Absolute);
            if worst.as_ref().is_none_or(|w| r.abs_err > w.abs_err) {
                worst = Some(r);
            }
        }
    }
    Ok(worst.expect("at least one DSO"))
}
