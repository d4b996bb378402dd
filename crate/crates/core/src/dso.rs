//! The followers' game.
//!
//! DSO `i` chooses its reactive demand `xi_i` inside `[q_min_i, q_max_i]` to
//! minimize `0.5 * C_i * xi_i^2 - gamma * (v_i - v_ref_i) * xi_i`. With the
//! affine voltage model the pseudo-gradient is `F(xi) = J xi - gamma * (v0 +
//! R p - v_ref)` where `J = C - gamma * (X + diag(X_ii))`, so the game has a
//! unique equilibrium whenever `J` is positive definite.
//!
//! The inner loop runs projected pseudo-gradient steps on `xi` together with
//! the matching recursion on `s = d xi / d v_ref`, driven by voltages taken
//! from a [`Plant`].

use alloc::boxed::Box;
use alloc::vec::Vec;

use thiserror::Error;

use crate::fanout::Fanout;
use crate::grid::{linearized_voltage, GridError, LinearSensitivities};
use crate::plant::Plant;
use crate::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GameError {
    #[error("DSO {index}: cost coefficient must be positive, got {value}")]
    NonPositiveCost { index: usize, value: f64 },
    #[error("DSO {index}: empty reactive power range [{q_min}, {q_max}]")]
    EmptyRange { index: usize, q_min: f64, q_max: f64 },
    #[error("tariff must be positive, got {0}")]
    NonPositiveTariff(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InnerLoopError {
    #[error("inner loop stalled after {iterations} iterations (residual {residual:.3e})")]
    Stall { iterations: usize, residual: f64, iterate: Box<GameIterate> },
    #[error("voltage measurement failed: {0}")]
    Plant(#[from] GridError),
}

/// One follower.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsoProfile {
    /// Grid bus hosting the DSO.
    pub bus: usize,
    /// `C_i` in `c_i(xi) = 0.5 * C_i * xi^2`.
    pub cost_coeff: f64,
    pub q_min: f64,
    pub q_max: f64,
}

impl DsoProfile {
    pub fn new(bus: usize, cost_coeff: f64, q_min: f64, q_max: f64) -> Result<Self, GameError> {
        let profile = Self { bus, cost_coeff, q_min, q_max };
        profile.validate(0)?;
        Ok(profile)
    }

    pub(crate) fn validate(&self, index: usize) -> Result<(), GameError> {
        if !(self.cost_coeff > 0.0) {
            return Err(GameError::NonPositiveCost { index, value: self.cost_coeff });
        }
        if !(self.q_min <= self.q_max) {
            return Err(GameError::EmptyRange { index, q_min: self.q_min, q_max: self.q_max });
        }
        Ok(())
    }

    /// Projection onto `[q_min, q_max]`.
    pub fn clamp(&self, x: f64) -> f64 {
        x.max(self.q_min).min(self.q_max)
    }

    pub fn cost(&self, xi: f64) -> f64 {
        0.5 * self.cost_coeff * xi * xi
    }
}

/// Payment from the TSO to a DSO: `gamma * (v - v_ref) * q`.
pub fn incentive_payment(q: f64, v: f64, v_ref: f64, gamma: f64) -> f64 {
    gamma * (v - v_ref) * q
}

/// `F_i = C_i xi_i - gamma (v_i - v_ref_i) - gamma xi_i dv_i/dxi_i`.
pub fn pseudo_gradient_i(profile: &DsoProfile, xi: f64, v: f64, v_ref: f64, gamma: f64, dv_dxi: f64) -> f64 {
    profile.cost_coeff * xi - gamma * (v - v_ref) - gamma * xi * dv_dxi
}

/// Derivative of the box projection: 1 on the closed box, 0 outside.
pub fn projection_derivative(x: f64, q_min: f64, q_max: f64) -> f64 {
    if q_min <= x && x <= q_max {
        1.0
    } else {
        0.0
    }
}

/// Joint follower state carried between inner iterations and across outer
/// iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct GameIterate {
    pub xi: Vector,
    /// Row `i` is the estimate of `d xi_i / d v_ref`.
    pub s: Matrix,
    /// Voltages measured at the current `xi`.
    pub v_meas: Vector,
    /// Inner iterations performed since the iterate was created.
    pub inner_iter: usize,
}

impl GameIterate {
    /// Zero demand, zero sensitivity, no measurement yet.
    pub fn cold(n: usize) -> Self {
        Self::new(Vector::zeros(n), Matrix::zeros(n, n))
    }

    pub fn new(xi: Vector, s: Matrix) -> Self {
        let n = xi.len();
        Self { xi, s, v_meas: Vector::zeros(n), inner_iter: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerLoopSettings {
    /// Pseudo-gradient step size.
    pub eta: f64,
    /// Termination threshold on the larger of the step in `xi` (Euclidean)
    /// and in `s` (Frobenius).
    pub sigma: f64,
    pub max_iter: usize,
}

impl InnerLoopSettings {
    pub fn new(eta: f64, sigma: f64) -> Self {
        Self { eta, sigma, max_iter: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerLoopOutcome {
    pub iterate: GameIterate,
    pub iterations: usize,
    pub residual: f64,
}

/// Strong-monotonicity and Lipschitz constants of the pseudo-gradient and
/// the contraction rate they imply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GameConditioning {
    /// `lambda_min(C - gamma X~)`.
    pub mu: f64,
    /// `||C - gamma X~||_2`.
    pub l_f: f64,
    pub eta: f64,
    /// `sqrt(1 - eta (2 mu - eta L_F^2))`, present when `mu > 0` and
    /// `eta < 2 mu / L_F^2`.
    pub theta: Option<f64>,
    /// Largest tariff keeping `mu > 0` in the sense of `c_min / lambda_max(X~)`;
    /// infinite when `X~` is negative definite.
    pub gamma_max: f64,
    pub lambda_max_x_tilde: f64,
    /// Tariff the report was computed for.
    pub gamma: f64,
}

impl GameConditioning {
    pub fn violated(&self) -> bool {
        !(self.mu > 0.0)
    }

    /// True when the tariff is above the sufficient bound `gamma_max`. With
    /// equal cost coefficients this coincides with [`Self::violated`].
    pub fn exceeds_gamma_max(&self) -> bool {
        self.gamma > self.gamma_max
    }

    /// Largest step size for which the inner iteration contracts.
    pub fn eta_max(&self) -> f64 {
        2.0 * self.mu / (self.l_f * self.l_f)
    }
}

/// The followers' game on an affine voltage model.
#[derive(Debug, Clone, PartialEq)]
pub struct DsoGame {
    profiles: Vec<DsoProfile>,
    sens: LinearSensitivities,
    /// Active demand at the DSO buses.
    p: Vector,
    gamma: f64,
}

impl DsoGame {
    /// Profile `i` is attached to position `i` of `sens`.
    pub fn new(profiles: Vec<DsoProfile>, sens: LinearSensitivities, p: Vector, gamma: f64) -> Result<Self, GameError> {
        let n = profiles.len();
        for len in [sens.len(), p.len()] {
            if len != n {
                return Err(GameError::DimensionMismatch { expected: n, found: len });
            }
        }
        for (i, profile) in profiles.iter().enumerate() {
            profile.validate(i)?;
        }
        if !(gamma > 0.0) {
            return Err(GameError::NonPositiveTariff(gamma));
        }
        Ok(Self { profiles, sens, p, gamma })
    }

    pub fn n(&self) -> usize {
        self.profiles.len()
    }

    pub fn profiles(&self) -> &[DsoProfile] {
        &self.profiles
    }

    pub fn sens(&self) -> &LinearSensitivities {
        &self.sens
    }

    pub fn p(&self) -> &Vector {
        &self.p
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Replaces the box of DSO `index`. Returns the previous profile.
    pub fn set_limits(&mut self, index: usize, q_min: f64, q_max: f64) -> Result<DsoProfile, GameError> {
        let n = self.n();
        let profile =
            self.profiles.get_mut(index).ok_or(GameError::DimensionMismatch { expected: n, found: index + 1 })?;
        let old = *profile;
        let updated = DsoProfile { q_min, q_max, ..old };
        updated.validate(index)?;
        *profile = updated;
        Ok(old)
    }

    /// `C - gamma X~`, the Jacobian of the pseudo-gradient.
    pub fn jacobian(&self) -> Matrix {
        let c = Vector::from_iterator(self.n(), self.profiles.iter().map(|p| p.cost_coeff));
        Matrix::from_diagonal(&c) - self.sens.x_tilde() * self.gamma
    }

    /// `v0 + R p`: the voltage with zero reactive demand.
    pub fn base_voltage(&self) -> Vector {
        self.sens.r() * &self.p + self.sens.v0()
    }

    /// Voltages predicted by the affine model.
    pub fn linear_voltage(&self, xi: &Vector) -> Vector {
        linearized_voltage(&self.sens, &self.p, xi).expect("dimensions checked at construction")
    }

    /// A plant that evaluates the affine model, for analysis mode.
    pub fn linear_plant(&self) -> impl FnMut(&Vector) -> Result<Vector, GridError> + '_ {
        move |xi: &Vector| linearized_voltage(&self.sens, &self.p, xi)
    }

    /// Pseudo-gradient using the supplied (measured) voltages.
    pub fn pseudo_gradient(&self, xi: &Vector, v: &Vector, v_ref: &Vector) -> Vector {
        let x = self.sens.x();
        Vector::from_fn(self.n(), |i, _| {
            pseudo_gradient_i(&self.profiles[i], xi[i], v[i], v_ref[i], self.gamma, x[(i, i)])
        })
    }

    fn pre_projection(&self, i: usize, it: &GameIterate, v_ref: &Vector, eta: f64) -> f64 {
        let f =
            pseudo_gradient_i(&self.profiles[i], it.xi[i], it.v_meas[i], v_ref[i], self.gamma, self.sens.x()[(i, i)]);
        it.xi[i] - eta * f
    }

    /// One synchronous projected pseudo-gradient step using `it.v_meas`.
    /// The returned iterate keeps the old `s` and `v_meas`.
    pub fn inner_step<E: Fanout>(&self, it: &GameIterate, v_ref: &Vector, eta: f64, fanout: &E) -> GameIterate {
        let xi = fanout.map(self.n(), |i| self.profiles[i].clamp(self.pre_projection(i, it, v_ref, eta)));
        GameIterate {
            xi: Vector::from_vec(xi),
            s: it.s.clone(),
            v_meas: it.v_meas.clone(),
            inner_iter: it.inner_iter + 1,
        }
    }

    /// Sensitivity recursion `s_i <- J2h_i s + J1h_i`, with the Jacobians of
    /// the projected step evaluated at `it.xi` and `it.v_meas` (the iterate
    /// just produced by [`Self::inner_step`] and its fresh measurement).
    pub fn sensitivity_step<E: Fanout>(&self, it: &GameIterate, v_ref: &Vector, eta: f64, fanout: &E) -> GameIterate {
        let n = self.n();
        let jac = self.jacobian();
        let rows = fanout.map(n, |i| {
            let z = self.pre_projection(i, it, v_ref, eta);
            let profile = &self.profiles[i];
            let mut row = Vec::with_capacity(n);
            if projection_derivative(z, profile.q_min, profile.q_max) == 0.0 {
                row.resize(n, 0.0);
                return row;
            }
            for col in 0..n {
                let coupled: f64 = (0..n).map(|j| jac[(i, j)] * it.s[(j, col)]).sum();
                let direct = if col == i { self.gamma } else { 0.0 };
                row.push(it.s[(i, col)] - eta * coupled - eta * direct);
            }
            row
        });
        let s = Matrix::from_fn(n, n, |i, j| rows[i][j]);
        GameIterate { s, ..it.clone() }
    }

    /// Equilibrium and sensitivity estimation from a warm start.
    ///
    /// Each iteration steps `xi` with the current measurement, measures the
    /// plant at the new `xi`, then updates `s`. Stops once both updates move
    /// by at most `sigma`.
    pub fn run_inner_loop<P: Plant, E: Fanout>(
        &self,
        start: GameIterate,
        v_ref: &Vector,
        settings: &InnerLoopSettings,
        plant: &mut P,
        fanout: &E,
    ) -> Result<InnerLoopOutcome, InnerLoopError> {
        let mut it = start;
        it.v_meas = plant.measure(&it.xi)?;
        let mut residual = f64::INFINITY;
        for iterations in 1..=settings.max_iter {
            let mut next = self.inner_step(&it, v_ref, settings.eta, fanout);
            next.v_meas = plant.measure(&next.xi)?;
            let next = self.sensitivity_step(&next, v_ref, settings.eta, fanout);
            residual = (&next.xi - &it.xi).norm().max((&next.s - &it.s).norm());
            it = next;
            if residual <= settings.sigma {
                return Ok(InnerLoopOutcome { iterate: it, iterations, residual });
            }
        }
        Err(InnerLoopError::Stall { iterations: settings.max_iter, residual, iterate: Box::new(it) })
    }

    /// Spectral quantities of `C - gamma X~` and the rate of the inner
    /// iteration for step size `eta`.
    pub fn check_conditioning(&self, eta: f64) -> GameConditioning {
        let jac_eigen = self.jacobian().symmetric_eigen().eigenvalues;
        let mu = jac_eigen.min();
        let l_f = jac_eigen.amax();
        let lambda_max_x_tilde = self.sens.x_tilde().clone().symmetric_eigen().eigenvalues.max();
        let c_min = self.profiles.iter().map(|p| p.cost_coeff).fold(f64::INFINITY, f64::min);
        let gamma_max = if lambda_max_x_tilde > 0.0 { c_min / lambda_max_x_tilde } else { f64::INFINITY };
        let theta = if mu > 0.0 && eta > 0.0 && eta < 2.0 * mu / (l_f * l_f) {
            Some(libm::sqrt(1.0 - eta * (2.0 * mu - eta * l_f * l_f)))
        } else {
            None
        };
        GameConditioning { mu, l_f, eta, theta, gamma_max, lambda_max_x_tilde, gamma: self.gamma }
    }
}
