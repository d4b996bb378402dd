//! The leader: voltage-band penalty, augmented objective, hypergradient and
//! the incentive update.

use thiserror::Error;

use crate::dso::incentive_payment;
use crate::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TsoError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}

/// Quadratic hinge on the voltage band,
/// `rho * max(0, v - v_hi)^2 + rho * max(0, v_lo - v)^2` summed over buses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoltagePenalty {
    pub v_lo: f64,
    pub v_hi: f64,
    pub rho: f64,
}

impl VoltagePenalty {
    pub fn new(v_lo: f64, v_hi: f64, rho: f64) -> Result<Self, TsoError> {
        if !(v_lo < v_hi) {
            return Err(TsoError::InvalidParameter("v_lo must be below v_hi"));
        }
        if !(rho > 0.0) {
            return Err(TsoError::InvalidParameter("rho must be positive"));
        }
        Ok(Self { v_lo, v_hi, rho })
    }

    pub fn value(&self, v: &Vector) -> f64 {
        v.iter()
            .map(|&vi| {
                let over = (vi - self.v_hi).max(0.0);
                let under = (self.v_lo - vi).max(0.0);
                self.rho * over * over + self.rho * under * under
            })
            .sum()
    }

    /// Zero inside the band, including at the band edges.
    pub fn gradient(&self, v: &Vector) -> Vector {
        v.map(|vi| 2.0 * self.rho * (vi - self.v_hi).max(0.0) - 2.0 * self.rho * (self.v_lo - vi).max(0.0))
    }
}

/// Total payments plus the voltage penalty.
pub fn augmented_objective(v_ref: &Vector, v: &Vector, q: &Vector, gamma: f64, penalty: &VoltagePenalty) -> f64 {
    let payments: f64 = (0..v.len()).map(|i| incentive_payment(q[i], v[i], v_ref[i], gamma)).sum();
    payments + penalty.value(v)
}

/// Hypergradient estimate split into its three chain-rule terms.
#[derive(Debug, Clone, PartialEq)]
pub struct HypergradientReport {
    pub grad: Vector,
    /// Explicit dependence on `v_ref`: `[-gamma xi_i]`.
    pub term_direct: Vector,
    /// Through the voltages: `(X s)^T [gamma xi_i + dphi/dv_i]`.
    pub term_voltage: Vector,
    /// Through the equilibrium: `s^T [gamma (v_i - v_ref_i)]`.
    pub term_equilibrium: Vector,
    /// Augmented objective at the supplied point.
    pub objective: f64,
}

/// Approximate hypergradient of the augmented objective from the inner
/// loop's equilibrium estimate `xi`, its sensitivity `s` and measured
/// voltages. The voltage sensitivity `dv/dq` is taken as `x`.
#[allow(clippy::too_many_arguments)]
pub fn hypergradient(
    v_ref: &Vector,
    v_meas: &Vector,
    xi: &Vector,
    s: &Matrix,
    x: &Matrix,
    gamma: f64,
    penalty: &VoltagePenalty,
) -> Result<HypergradientReport, TsoError> {
    let n = v_ref.len();
    let check = |what, found| {
        if found == n {
            Ok(())
        } else {
            Err(TsoError::DimensionMismatch { what, expected: n, found })
        }
    };
    check("v_meas", v_meas.len())?;
    check("xi", xi.len())?;
    check("s rows", s.nrows())?;
    check("s cols", s.ncols())?;
    check("x rows", x.nrows())?;
    check("x cols", x.ncols())?;

    let term_direct = xi * -gamma;
    let grad_v = xi * gamma + penalty.gradient(v_meas);
    let grad_q = (v_meas - v_ref) * gamma;
    let term_voltage = (x * s).transpose() * grad_v;
    let term_equilibrium = s.transpose() * grad_q;
    let grad = &term_direct + &term_voltage + &term_equilibrium;
    let objective = augmented_objective(v_ref, v_meas, xi, gamma, penalty);
    Ok(HypergradientReport { grad, term_direct, term_voltage, term_equilibrium, objective })
}

/// Step-size or tolerance sequence indexed by the outer iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Constant {
        value: f64,
    },
    /// `max(initial * ratio^k, floor)`.
    Geometric {
        initial: f64,
        ratio: f64,
        floor: f64,
    },
    /// `initial / (1 + k / horizon)`.
    Harmonic {
        initial: f64,
        horizon: f64,
    },
}

impl StepSchedule {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::Constant { value } => value,
            StepSchedule::Geometric { initial, ratio, floor } => (initial * libm::pow(ratio, k as f64)).max(floor),
            StepSchedule::Harmonic { initial, horizon } => initial / (1.0 + k as f64 / horizon),
        }
    }

    pub fn validate(&self) -> Result<(), TsoError> {
        let ok = match *self {
            StepSchedule::Constant { value } => value > 0.0,
            StepSchedule::Geometric { initial, ratio, floor } => initial > 0.0 && ratio > 0.0 && floor > 0.0,
            StepSchedule::Harmonic { initial, horizon } => initial > 0.0 && horizon > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(TsoError::InvalidParameter("schedule parameters must be strictly positive"))
        }
    }
}

/// The leader's decision and its update schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct IncentiveState {
    pub v_ref: Vector,
    pub gamma: f64,
    pub penalty: VoltagePenalty,
    pub epsilon: StepSchedule,
    pub sigma: StepSchedule,
    pub outer_iter: usize,
}

impl IncentiveState {
    pub fn new(
        v_ref: Vector,
        gamma: f64,
        penalty: VoltagePenalty,
        epsilon: StepSchedule,
        sigma: StepSchedule,
    ) -> Result<Self, TsoError> {
        if !(gamma > 0.0) {
            return Err(TsoError::InvalidParameter("gamma must be positive"));
        }
        epsilon.validate()?;
        sigma.validate()?;
        Ok(Self { v_ref, gamma, penalty, epsilon, sigma, outer_iter: 0 })
    }

    /// Inner-loop tolerance for the current outer iteration.
    pub fn sigma_now(&self) -> f64 {
        self.sigma.at(self.outer_iter)
    }

    pub fn epsilon_now(&self) -> f64 {
        self.epsilon.at(self.outer_iter)
    }
}

/// `v_ref <- v_ref - epsilon^k * grad`.
pub fn update_incentive(state: &IncentiveState, report: &HypergradientReport) -> IncentiveState {
    let eps = state.epsilon_now();
    IncentiveState { v_ref: &state.v_ref - &report.grad * eps, outer_iter: state.outer_iter + 1, ..state.clone() }
}
