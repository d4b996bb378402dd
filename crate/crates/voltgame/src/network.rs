//! Network description files.
//!
//! Buses are numbered from 1 in files and from 0 inside the solver.

use std::path::Path;

use serde::{Deserialize, Serialize};
use voltgame_core::{GridModel, Line};

use crate::error::{ScenarioError, ValidationError};

/// The bundled five-bus case.
pub const FIVE_BUS_NETWORK: &str = include_str!("../data/five_bus.network");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusSpec {
    pub id: usize,
    pub kind: BusKind,
    pub base_kv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b: f64,
}

/// Parsed network document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub base_mva: f64,
    #[serde(default = "one")]
    pub v_slack: f64,
    #[serde(rename = "bus")]
    pub buses: Vec<BusSpec>,
    #[serde(rename = "line")]
    pub lines: Vec<LineSpec>,
}

fn one() -> f64 {
    1.0
}

impl NetworkSpec {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ScenarioError> {
        let spec: NetworkSpec = toml::from_str(text).map_err(|e| ScenarioError::parse(origin, text, &e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text, path)
    }

    /// Checks numbering and voltage levels; line parameters are checked
    /// again when the grid is built.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let n = self.buses.len();
        if n < 2 {
            return Err(ValidationError::new("bus", "a network needs at least two buses"));
        }
        let mut seen = vec![false; n];
        for bus in &self.buses {
            if bus.id == 0 || bus.id > n || seen[bus.id - 1] {
                return Err(ValidationError::new(
                    "bus.id",
                    format!("ids must be 1..={n} without repeats (got {})", bus.id),
                ));
            }
            seen[bus.id - 1] = true;
        }
        let slack_count = self.buses.iter().filter(|b| b.kind == BusKind::Slack).count();
        if slack_count != 1 {
            return Err(ValidationError::new(
                "bus.kind",
                format!("exactly one slack bus required, found {slack_count}"),
            ));
        }
        let kv = self.buses[0].base_kv;
        if !(kv > 0.0) || self.buses.iter().any(|b| b.base_kv != kv) {
            return Err(ValidationError::new("bus.base_kv", "all buses must share one positive voltage level"));
        }
        if !(self.base_mva > 0.0) {
            return Err(ValidationError::new("base_mva", "must be positive"));
        }
        if !(self.v_slack > 0.0) {
            return Err(ValidationError::new("v_slack", "must be positive"));
        }
        for line in &self.lines {
            if line.from == 0 || line.from > n || line.to == 0 || line.to > n {
                return Err(ValidationError::new(
                    "line",
                    format!("line {}-{} references a missing bus", line.from, line.to),
                ));
            }
        }
        Ok(())
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    /// 1-based id of the slack bus.
    pub fn slack_id(&self) -> usize {
        self.buses.iter().find(|b| b.kind == BusKind::Slack).map_or(0, |b| b.id)
    }

    pub fn has_bus(&self, id: usize) -> bool {
        id >= 1 && id <= self.n_bus()
    }

    pub fn to_grid(&self) -> Result<GridModel, ValidationError> {
        let lines =
            self.lines.iter().map(|l| Line { from: l.from - 1, to: l.to - 1, r: l.r, x: l.x, b: l.b }).collect();
        GridModel::new(self.n_bus(), self.slack_id() - 1, lines, self.base_mva, self.buses[0].base_kv, self.v_slack)
            .map_err(|e| ValidationError::new("line", e.to_string()))
    }
}

/// The bundled five-bus network.
pub fn five_bus_spec() -> NetworkSpec {
    NetworkSpec::from_toml_str(FIVE_BUS_NETWORK, Path::new("five_bus.network")).expect("bundled network is valid")
}

/// The bundled five-bus case as a solver model.
pub fn build_five_bus() -> GridModel {
    five_bus_spec().to_grid().expect("bundled network is valid")
}
