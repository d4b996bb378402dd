//! Transmission network model, AC power flow and its linearization.
//!
//! Power quantities follow the load convention throughout: positive `p` and
//! `q` are demand drawn from the bus. Under this convention the reactive
//! self-sensitivity `dv_i/dq_i` is negative.
//!
//! All per-bus vectors passed to [`solve_ac_power_flow`] and [`linearize`]
//! are indexed over the non-slack buses in ascending bus order.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("invalid network: {0}")]
    InvalidNetwork(&'static str),
    #[error("line {line} references bus {bus}, but the network has {n_bus} buses")]
    UnknownBus { line: usize, bus: usize, n_bus: usize },
    #[error("line {line} has non-positive reactance {x}")]
    NonPositiveReactance { line: usize, x: f64 },
    #[error("network is not connected: bus {bus} is unreachable from the slack")]
    Disconnected { bus: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("power flow did not converge: mismatch {mismatch:.3e} p.u. after {iterations} iterations")]
    NonConvergence { mismatch: f64, iterations: usize },
    #[error("singular power-flow Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("self-sensitivity dv/dq at position {index} is {value:.3e}, expected negative")]
    SignConventionViolation { index: usize, value: f64 },
    #[error("reactance matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    AsymmetricReactance { asymmetry: f64 },
}

/// A transmission line in the pi model. Impedances are per unit on the
/// system base; `b` is the total line-charging susceptance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub b: f64,
}

/// Single-voltage-level network with one slack bus; every other bus is PQ.
#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    n_bus: usize,
    slack_bus: usize,
    lines: Vec<Line>,
    base_mva: f64,
    base_kv: f64,
    v_slack: f64,
}

impl GridModel {
    /// Validates and builds a network. Bus indices are zero-based.
    pub fn new(
        n_bus: usize,
        slack_bus: usize,
        lines: Vec<Line>,
        base_mva: f64,
        base_kv: f64,
        v_slack: f64,
    ) -> Result<Self, GridError> {
        if n_bus < 2 {
            return Err(GridError::InvalidNetwork("at least two buses are required"));
        }
        if slack_bus >= n_bus {
            return Err(GridError::InvalidNetwork("slack bus index out of range"));
        }
        if !(base_mva > 0.0) || !(base_kv > 0.0) {
            return Err(GridError::InvalidNetwork("base quantities must be strictly positive"));
        }
        if !(v_slack > 0.0) {
            return Err(GridError::InvalidNetwork("slack voltage must be strictly positive"));
        }
        for (k, line) in lines.iter().enumerate() {
            for bus in [line.from, line.to] {
                if bus >= n_bus {
                    return Err(GridError::UnknownBus { line: k, bus, n_bus });
                }
            }
            if line.from == line.to {
                return Err(GridError::InvalidNetwork("line connects a bus to itself"));
            }
            if !(line.x > 0.0) {
                return Err(GridError::NonPositiveReactance { line: k, x: line.x });
            }
            if !(line.r >= 0.0) || !line.b.is_finite() {
                return Err(GridError::InvalidNetwork("line resistance must be non-negative and susceptance finite"));
            }
        }

        // Breadth-first search from the slack.
        let mut seen = vec![false; n_bus];
        let mut queue = vec![slack_bus];
        seen[slack_bus] = true;
        while let Some(bus) = queue.pop() {
            for line in &lines {
                let other = if line.from == bus {
                    line.to
                } else if line.to == bus {
                    line.from
                } else {
                    continue;
                };
                if !seen[other] {
                    seen[other] = true;
                    queue.push(other);
                }
            }
        }
        if let Some(bus) = seen.iter().position(|s| !s) {
            return Err(GridError::Disconnected { bus });
        }

        Ok(Self { n_bus, slack_bus, lines, base_mva, base_kv, v_slack })
    }

    pub fn n_bus(&self) -> usize {
        self.n_bus
    }

    pub fn slack_bus(&self) -> usize {
        self.slack_bus
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn base_kv(&self) -> f64 {
        self.base_kv
    }

    pub fn v_slack(&self) -> f64 {
        self.v_slack
    }

    /// Number of PQ buses, i.e. the length of the `p`/`q` vectors.
    pub fn n_pq(&self) -> usize {
        self.n_bus - 1
    }

    /// Non-slack bus indices in ascending order.
    pub fn pq_buses(&self) -> Vec<usize> {
        (0..self.n_bus).filter(|&b| b != self.slack_bus).collect()
    }

    /// Position of `bus` within the non-slack ordering.
    pub fn pq_position(&self, bus: usize) -> Option<usize> {
        if bus >= self.n_bus || bus == self.slack_bus {
            None
        } else if bus < self.slack_bus {
            Some(bus)
        } else {
            Some(bus - 1)
        }
    }

    /// Bus admittance matrix split into conductance and susceptance parts.
    pub fn admittance(&self) -> (Matrix, Matrix) {
        let n = self.n_bus;
        let mut g = Matrix::zeros(n, n);
        let mut b = Matrix::zeros(n, n);
        for line in &self.lines {
            let z2 = line.r * line.r + line.x * line.x;
            let gs = line.r / z2;
            let bs = -line.x / z2;
            let (i, j) = (line.from, line.to);
            g[(i, i)] += gs;
            g[(j, j)] += gs;
            g[(i, j)] -= gs;
            g[(j, i)] -= gs;
            b[(i, i)] += bs + 0.5 * line.b;
            b[(j, j)] += bs + 0.5 * line.b;
            b[(i, j)] -= bs;
            b[(j, i)] -= bs;
        }
        (g, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFlowOptions {
    /// Maximum absolute active/reactive mismatch accepted, p.u.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iterations: 50 }
    }
}

/// Converged AC operating point. `v` and `theta` cover every bus, slack
/// included, in bus order.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub v: Vector,
    pub theta: Vector,
    pub mismatch: f64,
    pub iterations: usize,
}

impl PowerFlowSolution {
    /// Voltage magnitudes at the non-slack buses.
    pub fn pq_voltages(&self, grid: &GridModel) -> Vector {
        let buses = grid.pq_buses();
        Vector::from_iterator(buses.len(), buses.iter().map(|&b| self.v[b]))
    }
}

/// Injected power at every bus for the given state.
fn bus_injections(g: &Matrix, b: &Matrix, v: &Vector, theta: &Vector) -> (Vector, Vector) {
    let n = v.len();
    let mut p = Vector::zeros(n);
    let mut q = Vector::zeros(n);
    for i in 0..n {
        let (mut pi, mut qi) = (0.0, 0.0);
        for k in 0..n {
            let (s, c) = libm::sincos(theta[i] - theta[k]);
            pi += v[k] * (g[(i, k)] * c + b[(i, k)] * s);
            qi += v[k] * (g[(i, k)] * s - b[(i, k)] * c);
        }
        p[i] = v[i] * pi;
        q[i] = v[i] * qi;
    }
    (p, q)
}

/// Newton-Raphson solution of the polar power-flow equations from a flat
/// start. `p` and `q` are demands at the non-slack buses.
pub fn solve_ac_power_flow(
    grid: &GridModel,
    p: &Vector,
    q: &Vector,
    options: &PowerFlowOptions,
) -> Result<PowerFlowSolution, GridError> {
    let mut v = Vector::from_element(grid.n_bus(), 1.0);
    v[grid.slack_bus()] = grid.v_slack();
    newton(grid, p, q, options, v, Vector::zeros(grid.n_bus()))
}

/// Same as [`solve_ac_power_flow`] but starting from a previous solution,
/// which saves iterations when the demands moved only a little.
pub fn solve_ac_power_flow_from(
    grid: &GridModel,
    p: &Vector,
    q: &Vector,
    options: &PowerFlowOptions,
    start: &PowerFlowSolution,
) -> Result<PowerFlowSolution, GridError> {
    let n = grid.n_bus();
    if start.v.len() != n || start.theta.len() != n {
        return Err(GridError::DimensionMismatch { expected: n, found: start.v.len() });
    }
    newton(grid, p, q, options, start.v.clone(), start.theta.clone())
}

fn newton(
    grid: &GridModel,
    p: &Vector,
    q: &Vector,
    options: &PowerFlowOptions,
    mut v: Vector,
    mut theta: Vector,
) -> Result<PowerFlowSolution, GridError> {
    let m = grid.n_pq();
    for len in [p.len(), q.len()] {
        if len != m {
            return Err(GridError::DimensionMismatch { expected: m, found: len });
        }
    }
    let pq = grid.pq_buses();
    let (g, b) = grid.admittance();

    let mut iteration = 0;
    loop {
        let (p_calc, q_calc) = bus_injections(&g, &b, &v, &theta);
        let mut residual = Vector::zeros(2 * m);
        for (a, &bus) in pq.iter().enumerate() {
            residual[a] = -p[a] - p_calc[bus];
            residual[m + a] = -q[a] - q_calc[bus];
        }
        let mismatch = residual.amax();
        if !mismatch.is_finite() {
            return Err(GridError::NonConvergence { mismatch, iterations: iteration });
        }
        if mismatch <= options.tolerance {
            return Ok(PowerFlowSolution { v, theta, mismatch, iterations: iteration });
        }
        if iteration >= options.max_iterations {
            return Err(GridError::NonConvergence { mismatch, iterations: iteration });
        }

        let jac = jacobian(&g, &b, &v, &theta, &p_calc, &q_calc, &pq);
        let step = jac.lu().solve(&residual).ok_or(GridError::SingularJacobian { iteration })?;
        if step.iter().any(|x| !x.is_finite()) {
            return Err(GridError::SingularJacobian { iteration });
        }
        for (a, &bus) in pq.iter().enumerate() {
            theta[bus] += step[a];
            v[bus] += step[m + a];
        }
        iteration += 1;
        if v.iter().any(|&x| !(x > 0.0)) {
            return Err(GridError::NonConvergence { mismatch, iterations: iteration });
        }
    }
}

/// Jacobian of the non-slack injections with respect to `[theta; v]` at the
/// non-slack buses.
fn jacobian(
    g: &Matrix,
    b: &Matrix,
    v: &Vector,
    theta: &Vector,
    p_calc: &Vector,
    q_calc: &Vector,
    pq: &[usize],
) -> Matrix {
    let m = pq.len();
    let mut jac = Matrix::zeros(2 * m, 2 * m);
    for (a, &i) in pq.iter().enumerate() {
        for (c, &k) in pq.iter().enumerate() {
            if i == k {
                let (gii, bii, vi) = (g[(i, i)], b[(i, i)], v[i]);
                jac[(a, c)] = -q_calc[i] - bii * vi * vi;
                jac[(a, m + c)] = p_calc[i] / vi + gii * vi;
                jac[(m + a, c)] = p_calc[i] - gii * vi * vi;
                jac[(m + a, m + c)] = q_calc[i] / vi - bii * vi;
            } else {
                let (s, co) = libm::sincos(theta[i] - theta[k]);
                let (gik, bik) = (g[(i, k)], b[(i, k)]);
                jac[(a, c)] = v[i] * v[k] * (gik * s - bik * co);
                jac[(a, m + c)] = v[i] * (gik * co + bik * s);
                jac[(m + a, c)] = -v[i] * v[k] * (gik * co + bik * s);
                jac[(m + a, m + c)] = v[i] * (gik * s - bik * co);
            }
        }
    }
    jac
}

/// Affine voltage model `v = R p + X q + v0` over a set of buses.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSensitivities {
    r: Matrix,
    x: Matrix,
    v0: Vector,
    x_tilde: Matrix,
}

impl LinearSensitivities {
    /// Checks shapes, symmetry of `x` (to 1e-9 relative) and the sign of its
    /// diagonal, then caches `X + diag(X_ii)`.
    pub fn new(r: Matrix, x: Matrix, v0: Vector) -> Result<Self, GridError> {
        let n = v0.len();
        for (rows, cols) in [r.shape(), x.shape()] {
            if rows != n {
                return Err(GridError::DimensionMismatch { expected: n, found: rows });
            }
            if cols != n {
                return Err(GridError::DimensionMismatch { expected: n, found: cols });
            }
        }
        let asymmetry = (&x - x.transpose()).amax();
        if asymmetry > 1e-9 * x.amax().max(1.0) {
            return Err(GridError::AsymmetricReactance { asymmetry });
        }
        if let Some(index) = (0..n).find(|&i| !(x[(i, i)] < 0.0)) {
            return Err(GridError::SignConventionViolation { index, value: x[(index, index)] });
        }
        let mut x_tilde = x.clone();
        for i in 0..n {
            x_tilde[(i, i)] += x[(i, i)];
        }
        Ok(Self { r, x, v0, x_tilde })
    }

    pub fn len(&self) -> usize {
        self.v0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v0.is_empty()
    }

    /// `dv/dp`.
    pub fn r(&self) -> &Matrix {
        &self.r
    }

    /// `dv/dq`.
    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn v0(&self) -> &Vector {
        &self.v0
    }

    /// `X + diag(X_ii)`.
    pub fn x_tilde(&self) -> &Matrix {
        &self.x_tilde
    }

    /// Restricts the model to the positions in `keep`. Positions left out are
    /// held at active demand `p_fixed` and zero reactive demand; their
    /// contribution is folded into the new offset.
    pub fn restrict(&self, keep: &[usize], p_fixed: &Vector) -> Result<Self, GridError> {
        let n = self.len();
        if p_fixed.len() != n {
            return Err(GridError::DimensionMismatch { expected: n, found: p_fixed.len() });
        }
        if let Some(&bad) = keep.iter().find(|&&i| i >= n) {
            return Err(GridError::DimensionMismatch { expected: n, found: bad + 1 });
        }
        let k = keep.len();
        let r = Matrix::from_fn(k, k, |a, b| self.r[(keep[a], keep[b])]);
        let x = Matrix::from_fn(k, k, |a, b| self.x[(keep[a], keep[b])]);
        let v0 = Vector::from_fn(k, |a, _| {
            let row = keep[a];
            let dropped: f64 = (0..n).filter(|j| !keep.contains(j)).map(|j| self.r[(row, j)] * p_fixed[j]).sum();
            self.v0[row] + dropped
        });
        Self::new(r, x, v0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizeOptions {
    /// Central-difference step, p.u.
    pub step: f64,
    pub power_flow: PowerFlowOptions,
}

impl Default for LinearizeOptions {
    fn default() -> Self {
        Self { step: 1e-4, power_flow: PowerFlowOptions::default() }
    }
}

/// Finite-difference linearization of the AC voltage magnitudes around
/// `(p0, q0)`. The offset is chosen so the model reproduces the AC solution
/// at the linearization point; `X` is symmetrized.
pub fn linearize(
    grid: &GridModel,
    p0: &Vector,
    q0: &Vector,
    options: &LinearizeOptions,
) -> Result<LinearSensitivities, GridError> {
    let pf = &options.power_flow;
    let base = solve_ac_power_flow(grid, p0, q0, pf)?.pq_voltages(grid);
    let m = grid.n_pq();
    let h = options.step;

    let column = |p: &Vector, q: &Vector, j: usize, reactive: bool| -> Result<Vector, GridError> {
        let (mut p_hi, mut q_hi) = (p.clone(), q.clone());
        let (mut p_lo, mut q_lo) = (p.clone(), q.clone());
        if reactive {
            q_hi[j] += h;
            q_lo[j] -= h;
        } else {
            p_hi[j] += h;
            p_lo[j] -= h;
        }
        let hi = solve_ac_power_flow(grid, &p_hi, &q_hi, pf)?.pq_voltages(grid);
        let lo = solve_ac_power_flow(grid, &p_lo, &q_lo, pf)?.pq_voltages(grid);
        Ok((hi - lo) / (2.0 * h))
    };

    let mut r = Matrix::zeros(m, m);
    let mut x = Matrix::zeros(m, m);
    for j in 0..m {
        r.set_column(j, &column(p0, q0, j, false)?);
        x.set_column(j, &column(p0, q0, j, true)?);
    }
    let x = (&x + x.transpose()) * 0.5;
    let v0 = &base - &r * p0 - &x * q0;
    LinearSensitivities::new(r, x, v0)
}

/// `R p + X q + v0`.
pub fn linearized_voltage(sens: &LinearSensitivities, p: &Vector, q: &Vector) -> Result<Vector, GridError> {
    let n = sens.len();
    for len in [p.len(), q.len()] {
        if len != n {
            return Err(GridError::DimensionMismatch { expected: n, found: len });
        }
    }
    Ok(sens.r() * p + sens.x() * q + sens.v0())
}
