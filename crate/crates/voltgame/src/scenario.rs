//! Scenario files: everything needed to reproduce one co-design run.
//!
//! A scenario names a network file (resolved relative to the scenario
//! itself), the active loads, the DSOs and their reactive power boxes, the
//! incentive and step-size parameters, and an optional list of disturbances.
//! DSO cost coefficients may be given explicitly or drawn from `cost_range`
//! with the scenario `seed`; the seed is the only source of randomness.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voltgame_core::{CodesignProblem, CodesignSettings, Disturbance, DsoProfile, PlantMode, StepSchedule, Vector};

use crate::error::{ScenarioError, ValidationError};
use crate::network::{five_bus_spec, NetworkSpec};

pub const FIVE_BUS_SCENARIO: &str = include_str!("../data/five_bus.scenario");
pub const FIVE_BUS_DISTURBANCE_SCENARIO: &str = include_str!("../data/five_bus_disturbance.scenario");

/// Directory holding the bundled data files in a source checkout.
pub fn data_dir() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/data"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ModeSpec {
    #[default]
    Feedback,
    LinearAnalysis,
}

impl From<ModeSpec> for PlantMode {
    fn from(mode: ModeSpec) -> Self {
        match mode {
            ModeSpec::Feedback => PlantMode::Feedback,
            ModeSpec::LinearAnalysis => PlantMode::Linear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleSpec {
    Constant { value: f64 },
    Geometric { initial: f64, ratio: f64, floor: f64 },
    Harmonic { initial: f64, horizon: f64 },
}

impl From<ScheduleSpec> for StepSchedule {
    fn from(s: ScheduleSpec) -> Self {
        match s {
            ScheduleSpec::Constant { value } => StepSchedule::Constant { value },
            ScheduleSpec::Geometric { initial, ratio, floor } => StepSchedule::Geometric { initial, ratio, floor },
            ScheduleSpec::Harmonic { initial, horizon } => StepSchedule::Harmonic { initial, horizon },
        }
    }
}

impl From<StepSchedule> for ScheduleSpec {
    fn from(s: StepSchedule) -> Self {
        match s {
            StepSchedule::Constant { value } => ScheduleSpec::Constant { value },
            StepSchedule::Geometric { initial, ratio, floor } => ScheduleSpec::Geometric { initial, ratio, floor },
            StepSchedule::Harmonic { initial, horizon } => ScheduleSpec::Harmonic { initial, horizon },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum VRefInit {
    Uniform(f64),
    PerDso(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoadDoc {
    bus: usize,
    p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DsoDoc {
    bus: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cost: Option<f64>,
    q_min: f64,
    q_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DisturbanceDoc {
    at_outer_iter: usize,
    dso: usize,
    q_min: f64,
    q_max: f64,
}

fn default_inner_max_iter() -> usize {
    10_000
}

fn default_max_outer() -> usize {
    5000
}

fn default_grad_tol() -> f64 {
    1e-6
}

/// On-disk layout. Plain values come before tables so the canonical
/// writer produces valid TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    network: PathBuf,
    #[serde(default)]
    mode: ModeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    gamma: f64,
    rho: f64,
    v_lo: f64,
    v_hi: f64,
    #[serde(default)]
    penalty_margin: f64,
    eta: f64,
    #[serde(default = "default_inner_max_iter")]
    inner_max_iter: usize,
    v_ref_init: VRefInit,
    #[serde(default = "default_max_outer")]
    max_outer: usize,
    #[serde(default = "default_grad_tol")]
    grad_tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cost_range: Option<[f64; 2]>,
    epsilon: ScheduleSpec,
    sigma: ScheduleSpec,
    #[serde(rename = "load", default)]
    loads: Vec<LoadDoc>,
    #[serde(rename = "dso")]
    dsos: Vec<DsoDoc>,
    #[serde(rename = "disturbance", default)]
    disturbances: Vec<DisturbanceDoc>,
}

/// One DSO after cost resolution. `bus` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsoSpec {
    pub bus: usize,
    pub cost: f64,
    pub q_min: f64,
    pub q_max: f64,
}

/// A scheduled change of one DSO's box. `dso` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisturbanceSpec {
    pub at_outer_iter: usize,
    pub dso: usize,
    pub q_min: f64,
    pub q_max: f64,
}

/// A fully validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub network_path: PathBuf,
    pub network: NetworkSpec,
    pub mode: ModeSpec,
    pub seed: Option<u64>,
    pub gamma: f64,
    pub rho: f64,
    pub v_lo: f64,
    pub v_hi: f64,
    pub penalty_margin: f64,
    pub eta: f64,
    pub inner_max_iter: usize,
    pub epsilon: StepSchedule,
    pub sigma: StepSchedule,
    pub v_ref_init: Vec<f64>,
    pub max_outer: usize,
    pub grad_tol: f64,
    pub cost_range: Option<(f64, f64)>,
    /// Active demand per bus in p.u., indexed by 1-based id minus one.
    pub loads: Vec<f64>,
    pub dsos: Vec<DsoSpec>,
    pub disturbances: Vec<DisturbanceSpec>,
}

/// Reads, parses and validates a scenario file together with its network.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig, ScenarioError> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    let doc = parse_doc(&text, path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let joined = base.join(&doc.network);
    let network_path = std::fs::canonicalize(&joined).unwrap_or(joined);
    let network = NetworkSpec::load(&network_path)?;
    ScenarioConfig::from_doc(doc, network_path, network)
}

/// The bundled scenario text paired with the bundled network, usable
/// without a source checkout.
pub fn bundled_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let doc = parse_doc(text, Path::new("<bundled>"))?;
    let network_path = doc.network.clone();
    ScenarioConfig::from_doc(doc, network_path, five_bus_spec())
}

fn parse_doc(text: &str, origin: &Path) -> Result<ScenarioDoc, ScenarioError> {
    toml::from_str(text).map_err(|e| ScenarioError::parse(origin, text, &e))
}

fn check(ok: bool, field: &str, message: &str) -> Result<(), ValidationError> {
    if ok {
        Ok(())
    } else {
        Err(ValidationError::new(field, message))
    }
}

impl ScenarioConfig {
    fn from_doc(doc: ScenarioDoc, network_path: PathBuf, network: NetworkSpec) -> Result<Self, ScenarioError> {
        let slack = network.slack_id();
        let n_bus = network.n_bus();
        let bus_ok = |field: &str, bus: usize| -> Result<(), ValidationError> {
            if !network.has_bus(bus) {
                Err(ValidationError::new(field, format!("bus {bus} does not exist")))
            } else if bus == slack {
                Err(ValidationError::new(field, format!("bus {bus} is the slack bus")))
            } else {
                Ok(())
            }
        };

        check(doc.gamma > 0.0, "gamma", "must be positive")?;
        check(doc.rho > 0.0, "rho", "must be positive")?;
        check(doc.v_lo > 0.0 && doc.v_lo < doc.v_hi, "v_lo", "need 0 < v_lo < v_hi")?;
        check(
            doc.penalty_margin >= 0.0 && doc.v_lo + doc.penalty_margin < doc.v_hi - doc.penalty_margin,
            "penalty_margin",
            "must be non-negative and leave a non-empty band",
        )?;
        check(doc.eta > 0.0, "eta", "must be positive")?;
        check(doc.inner_max_iter > 0, "inner_max_iter", "must be positive")?;
        check(doc.max_outer > 0, "max_outer", "must be positive")?;
        check(doc.grad_tol >= 0.0, "grad_tol", "must be non-negative")?;
        let epsilon = StepSchedule::from(doc.epsilon);
        let sigma = StepSchedule::from(doc.sigma);
        check(epsilon.validate().is_ok(), "epsilon", "schedule parameters must be strictly positive")?;
        check(sigma.validate().is_ok(), "sigma", "schedule parameters must be strictly positive")?;

        let mut loads = vec![0.0; n_bus];
        let mut has_load = vec![false; n_bus];
        for load in &doc.loads {
            bus_ok("load.bus", load.bus)?;
            check(!has_load[load.bus - 1], "load.bus", "listed twice")?;
            check(load.p.is_finite(), "load.p", "must be finite")?;
            has_load[load.bus - 1] = true;
            loads[load.bus - 1] = load.p;
        }

        let cost_range = match doc.cost_range {
            Some([lo, hi]) => {
                check(lo > 0.0 && lo <= hi, "cost_range", "need 0 < low <= high")?;
                Some((lo, hi))
            }
            None => None,
        };
        check(!doc.dsos.is_empty(), "dso", "at least one DSO is required")?;
        let needs_draw = doc.dsos.iter().any(|d| d.cost.is_none());
        if needs_draw {
            check(cost_range.is_some(), "cost_range", "required when a DSO has no explicit cost")?;
            check(doc.seed.is_some(), "seed", "required when costs are drawn from cost_range")?;
        }
        let mut rng = doc.seed.map(ChaCha8Rng::seed_from_u64);
        let mut dsos = Vec::with_capacity(doc.dsos.len());
        for d in &doc.dsos {
            bus_ok("dso.bus", d.bus)?;
            check(dsos.iter().all(|o: &DsoSpec| o.bus != d.bus), "dso.bus", "two DSOs share a bus")?;
            check(d.q_min <= d.q_max, "dso.q_min", "must not exceed q_max")?;
            let cost = match (d.cost, cost_range, rng.as_mut()) {
                (Some(c), _, _) => c,
                (None, Some((lo, hi)), Some(rng)) => rng.gen_range(lo..=hi),
                _ => unreachable!("checked above"),
            };
            check(cost > 0.0, "dso.cost", "must be positive")?;
            dsos.push(DsoSpec { bus: d.bus, cost, q_min: d.q_min, q_max: d.q_max });
        }

        let n = dsos.len();
        let v_ref_init = match doc.v_ref_init {
            VRefInit::Uniform(v) => vec![v; n],
            VRefInit::PerDso(v) => v,
        };
        check(v_ref_init.len() == n, "v_ref_init", "needs one entry per DSO or a single value")?;
        check(v_ref_init.iter().all(|v| v.is_finite()), "v_ref_init", "must be finite")?;

        let mut disturbances = Vec::with_capacity(doc.disturbances.len());
        for d in &doc.disturbances {
            check(d.dso >= 1 && d.dso <= n, "disturbance.dso", "must name a listed DSO (1-based)")?;
            check(d.q_min <= d.q_max, "disturbance.q_min", "must not exceed q_max")?;
            disturbances.push(DisturbanceSpec {
                at_outer_iter: d.at_outer_iter,
                dso: d.dso,
                q_min: d.q_min,
                q_max: d.q_max,
            });
        }

        let config = ScenarioConfig {
            network_path,
            network,
            mode: doc.mode,
            seed: doc.seed,
            gamma: doc.gamma,
            rho: doc.rho,
            v_lo: doc.v_lo,
            v_hi: doc.v_hi,
            penalty_margin: doc.penalty_margin,
            eta: doc.eta,
            inner_max_iter: doc.inner_max_iter,
            epsilon,
            sigma,
            v_ref_init,
            max_outer: doc.max_outer,
            grad_tol: doc.grad_tol,
            cost_range,
            loads,
            dsos,
            disturbances,
        };
        // Catches problems only the solver model can see, such as a
        // disconnected network.
        config.network.to_grid()?;
        Ok(config)
    }

    /// Cost coefficients in DSO order.
    pub fn costs(&self) -> Vec<f64> {
        self.dsos.iter().map(|d| d.cost).collect()
    }

    /// Canonical TOML. Drawn costs are written out explicitly, so loading
    /// the result gives back an equal configuration.
    pub fn to_toml_string(&self) -> String {
        let doc = ScenarioDoc {
            network: self.network_path.clone(),
            mode: self.mode,
            seed: self.seed,
            gamma: self.gamma,
            rho: self.rho,
            v_lo: self.v_lo,
            v_hi: self.v_hi,
            penalty_margin: self.penalty_margin,
            eta: self.eta,
            inner_max_iter: self.inner_max_iter,
            v_ref_init: VRefInit::PerDso(self.v_ref_init.clone()),
            max_outer: self.max_outer,
            grad_tol: self.grad_tol,
            cost_range: self.cost_range.map(|(lo, hi)| [lo, hi]),
            epsilon: self.epsilon.into(),
            sigma: self.sigma.into(),
            loads: (0..self.loads.len())
                .filter(|&i| self.loads[i] != 0.0)
                .map(|i| LoadDoc { bus: i + 1, p: self.loads[i] })
                .collect(),
            dsos: self
                .dsos
                .iter()
                .map(|d| DsoDoc { bus: d.bus, cost: Some(d.cost), q_min: d.q_min, q_max: d.q_max })
                .collect(),
            disturbances: self
                .disturbances
                .iter()
                .map(|d| DisturbanceDoc { at_outer_iter: d.at_outer_iter, dso: d.dso, q_min: d.q_min, q_max: d.q_max })
                .collect(),
        };
        toml::to_string(&doc).expect("scenario documents always serialize")
    }

    /// Builds the solver input. Bus and DSO numbers become 0-based here.
    pub fn to_problem(&self) -> Result<CodesignProblem, ValidationError> {
        let grid = self.network.to_grid()?;
        let buses = grid.pq_buses();
        let p = Vector::from_iterator(buses.len(), buses.iter().map(|&b| self.loads[b]));
        let profiles = self
            .dsos
            .iter()
            .map(|d| {
                DsoProfile::new(d.bus - 1, d.cost, d.q_min, d.q_max)
                    .map_err(|e| ValidationError::new("dso", e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let disturbances = self
            .disturbances
            .iter()
            .map(|d| Disturbance {
                at_outer_iter: d.at_outer_iter,
                dso_index: d.dso - 1,
                new_q_min: d.q_min,
                new_q_max: d.q_max,
            })
            .collect();
        let mut settings = CodesignSettings::new(self.gamma, self.rho, self.v_lo, self.v_hi, self.dsos.len());
        settings.penalty_margin = self.penalty_margin;
        settings.eta = self.eta;
        settings.inner_max_iter = self.inner_max_iter;
        settings.epsilon = self.epsilon;
        settings.sigma = self.sigma;
        settings.v_ref_init = Vector::from_vec(self.v_ref_init.clone());
        settings.max_outer = self.max_outer;
        settings.grad_tol = self.grad_tol;
        settings.mode = self.mode.into();
        Ok(CodesignProblem { grid, p, profiles, disturbances, settings })
    }
}
