//! Voltage sources for the feedback loops.
//!
//! A [`Plant`] turns the DSOs' reactive demands into the voltage magnitudes
//! they would measure at their buses. [`AcPlant`] solves the nonlinear power
//! flow; [`LinearPlant`] evaluates the affine model used by the analysis.

use alloc::vec::Vec;

use crate::grid::{
    linearized_voltage, solve_ac_power_flow, solve_ac_power_flow_from, GridError, GridModel, LinearSensitivities,
    PowerFlowOptions, PowerFlowSolution,
};
use crate::Vector;

pub trait Plant {
    /// Voltage magnitudes at the DSO buses for reactive demands `xi`.
    fn measure(&mut self, xi: &Vector) -> Result<Vector, GridError>;
}

impl<F> Plant for F
where
    F: FnMut(&Vector) -> Result<Vector, GridError>,
{
    fn measure(&mut self, xi: &Vector) -> Result<Vector, GridError> {
        self(xi)
    }
}

/// Nonlinear grid with fixed active demand; DSO reactive demands are placed
/// at their buses, every other bus draws no reactive power.
///
/// Each solve starts from the previous operating point and falls back to a
/// flat start if that fails, so consecutive measurements of nearby demands
/// need only one or two Newton steps.
#[derive(Debug, Clone)]
pub struct AcPlant {
    grid: GridModel,
    p: Vector,
    positions: Vec<usize>,
    options: PowerFlowOptions,
    solves: usize,
    last: Option<PowerFlowSolution>,
}

impl AcPlant {
    /// `p` covers every non-slack bus; `positions[i]` is the non-slack
    /// position hosting DSO `i`.
    pub fn new(
        grid: GridModel,
        p: Vector,
        positions: Vec<usize>,
        options: PowerFlowOptions,
    ) -> Result<Self, GridError> {
        let m = grid.n_pq();
        if p.len() != m {
            return Err(GridError::DimensionMismatch { expected: m, found: p.len() });
        }
        if let Some(&bad) = positions.iter().find(|&&i| i >= m) {
            return Err(GridError::DimensionMismatch { expected: m, found: bad + 1 });
        }
        Ok(Self { grid, p, positions, options, solves: 0, last: None })
    }

    pub fn grid(&self) -> &GridModel {
        &self.grid
    }

    /// Number of power-flow solves performed so far.
    pub fn solves(&self) -> usize {
        self.solves
    }

    /// Operating point of the most recent successful measurement.
    pub fn last_solution(&self) -> Option<&PowerFlowSolution> {
        self.last.as_ref()
    }
}

impl Plant for AcPlant {
    fn measure(&mut self, xi: &Vector) -> Result<Vector, GridError> {
        if xi.len() != self.positions.len() {
            return Err(GridError::DimensionMismatch { expected: self.positions.len(), found: xi.len() });
        }
        let mut q = Vector::zeros(self.grid.n_pq());
        for (i, &pos) in self.positions.iter().enumerate() {
            q[pos] = xi[i];
        }
        self.solves += 1;
        let warm = self
            .last
            .as_ref()
            .and_then(|start| solve_ac_power_flow_from(&self.grid, &self.p, &q, &self.options, start).ok());
        let sol = match warm {
            Some(sol) => sol,
            None => solve_ac_power_flow(&self.grid, &self.p, &q, &self.options)?,
        };
        let pq = sol.pq_voltages(&self.grid);
        let v = Vector::from_iterator(self.positions.len(), self.positions.iter().map(|&pos| pq[pos]));
        self.last = Some(sol);
        Ok(v)
    }
}

/// `v = R p + X xi + v0` with fixed `p`.
#[derive(Debug, Clone)]
pub struct LinearPlant {
    sens: LinearSensitivities,
    p: Vector,
}

impl LinearPlant {
    pub fn new(sens: LinearSensitivities, p: Vector) -> Result<Self, GridError> {
        if p.len() != sens.len() {
            return Err(GridError::DimensionMismatch { expected: sens.len(), found: p.len() });
        }
        Ok(Self { sens, p })
    }
}

impl Plant for LinearPlant {
    fn measure(&mut self, xi: &Vector) -> Result<Vector, GridError> {
        linearized_voltage(&self.sens, &self.p, xi)
    }
}
