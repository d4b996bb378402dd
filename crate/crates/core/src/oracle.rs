//! Reference solutions for the affine voltage model.
//!
//! Nothing here calls the iterative machinery it is meant to check: the
//! equilibrium comes from a dense linear solve followed by exact cyclic
//! best-response sweeps, and the hypergradient reference differentiates the
//! leader's objective numerically through that equilibrium.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::dso::DsoGame;
use crate::tso::{augmented_objective, VoltagePenalty};
use crate::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("C - gamma X~ is not positive definite")]
    NotPositiveDefinite,
    #[error("best-response sweep did not settle after {sweeps} sweeps (last change {change:.3e})")]
    NoConvergence { sweeps: usize, change: f64 },
    #[error("KKT residual {residual:.3e} exceeds 1e-10")]
    KktResidual { residual: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

const MAX_SWEEPS: usize = 100_000;
const KKT_TOL: f64 = 1e-10;

/// Unconstrained equilibrium `gamma (C - gamma X~)^{-1} (v0 + R p - v_ref)`.
pub fn unconstrained_ne(game: &DsoGame, v_ref: &Vector) -> Result<Vector, OracleError> {
    check_len(game, v_ref.len())?;
    let rhs = (game.base_voltage() - v_ref) * game.gamma();
    let chol = game.jacobian().cholesky().ok_or(OracleError::NotPositiveDefinite)?;
    Ok(chol.solve(&rhs))
}

/// Best response of DSO `i` to the others' demands in `q`.
fn best_response(game: &DsoGame, base: &Vector, q: &Vector, v_ref: &Vector, i: usize) -> f64 {
    let x = game.sens().x();
    let gamma = game.gamma();
    let others: f64 = (0..q.len()).filter(|&j| j != i).map(|j| x[(i, j)] * q[j]).sum();
    let k = base[i] + others - v_ref[i];
    let profile = &game.profiles()[i];
    profile.clamp(gamma * k / (profile.cost_coeff - 2.0 * gamma * x[(i, i)]))
}

/// Largest violation of the projected fixed-point condition
/// `q = P(q - F(q))`, which is equivalent to the per-DSO KKT conditions.
pub fn kkt_residual(game: &DsoGame, q: &Vector, v_ref: &Vector) -> f64 {
    let f = game.jacobian() * q - (game.base_voltage() - v_ref) * game.gamma();
    (0..q.len()).map(|i| (q[i] - game.profiles()[i].clamp(q[i] - f[i])).abs()).fold(0.0, f64::max)
}

/// Constrained Nash equilibrium: the unconstrained solution, projected, then
/// refined by cyclic exact best responses until nothing moves.
pub fn closed_form_ne(game: &DsoGame, v_ref: &Vector) -> Result<Vector, OracleError> {
    let free = unconstrained_ne(game, v_ref)?;
    let mut q = Vector::from_fn(game.n(), |i, _| game.profiles()[i].clamp(free[i]));
    let base = game.base_voltage();
    let mut change = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        change = 0.0;
        for i in 0..game.n() {
            let br = best_response(game, &base, &q, v_ref, i);
            change = change.max((br - q[i]).abs());
            q[i] = br;
        }
        if change <= 1e-14 * q.amax().max(1.0) {
            let residual = kkt_residual(game, &q, v_ref);
            if residual > KKT_TOL {
                return Err(OracleError::KktResidual { residual });
            }
            return Ok(q);
        }
    }
    Err(OracleError::NoConvergence { sweeps: MAX_SWEEPS, change })
}

/// Which DSOs sit at a bound with the unconstrained best response strictly
/// outside their box.
pub fn saturated(game: &DsoGame, q: &Vector, v_ref: &Vector) -> Vec<bool> {
    let x = game.sens().x();
    let gamma = game.gamma();
    let base = game.base_voltage();
    (0..game.n())
        .map(|i| {
            let others: f64 = (0..q.len()).filter(|&j| j != i).map(|j| x[(i, j)] * q[j]).sum();
            let profile = &game.profiles()[i];
            let raw = gamma * (base[i] + others - v_ref[i]) / (profile.cost_coeff - 2.0 * gamma * x[(i, i)]);
            raw < profile.q_min || raw > profile.q_max
        })
        .collect()
}

/// Sensitivity of the equilibrium `q` to `v_ref` by implicit
/// differentiation: `-gamma (J_UU)^{-1}` on the unsaturated block, zero
/// elsewhere.
pub fn equilibrium_sensitivity(game: &DsoGame, q: &Vector, v_ref: &Vector) -> Result<Matrix, OracleError> {
    let pinned = saturated(game, q, v_ref);
    let free: Vec<usize> = (0..game.n()).filter(|&i| !pinned[i]).collect();
    let jac = game.jacobian();
    let sub = Matrix::from_fn(free.len(), free.len(), |a, b| jac[(free[a], free[b])]);
    let inv = sub.cholesky().ok_or(OracleError::NotPositiveDefinite)?.inverse();
    let mut s = Matrix::zeros(game.n(), game.n());
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            s[(i, j)] = -game.gamma() * inv[(a, b)];
        }
    }
    Ok(s)
}

/// Leader objective evaluated at the exact equilibrium for `v_ref`.
pub fn leader_objective(game: &DsoGame, penalty: &VoltagePenalty, v_ref: &Vector) -> Result<f64, OracleError> {
    let q = closed_form_ne(game, v_ref)?;
    let v = game.linear_voltage(&q);
    Ok(augmented_objective(v_ref, &v, &q, game.gamma(), penalty))
}

/// Central finite differences of [`leader_objective`].
pub fn fd_hypergradient(
    game: &DsoGame,
    penalty: &VoltagePenalty,
    v_ref: &Vector,
    h: f64,
) -> Result<Vector, OracleError> {
    check_len(game, v_ref.len())?;
    let mut grad = Vector::zeros(game.n());
    for i in 0..game.n() {
        let mut hi = v_ref.clone();
        let mut lo = v_ref.clone();
        hi[i] += h;
        lo[i] -= h;
        grad[i] = (leader_objective(game, penalty, &hi)? - leader_objective(game, penalty, &lo)?) / (2.0 * h);
    }
    Ok(grad)
}

/// Checks that every coordinate of `q` is a best response to the rest.
pub fn verify_ne(game: &DsoGame, q: &Vector, v_ref: &Vector, tol: f64) -> OracleReport {
    let base = game.base_voltage();
    let br = Vector::from_fn(game.n(), |i, _| best_response(game, &base, q, v_ref, i));
    OracleReport::compare_vectors("nash_best_response", q, &br, tol, ErrorMetric::Absolute)
}

fn check_len(game: &DsoGame, len: usize) -> Result<(), OracleError> {
    if len == game.n() {
        Ok(())
    } else {
        Err(OracleError::DimensionMismatch { expected: game.n(), found: len })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorMetric {
    Absolute,
    Relative,
}

/// Outcome of one comparison between an algorithm and its reference.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub quantity: String,
    pub algorithm: f64,
    pub oracle: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub metric: ErrorMetric,
    pub tol: f64,
    pub passed: bool,
}

impl OracleReport {
    /// Builds a report from a precomputed absolute error.
    pub fn with_error(
        quantity: &str,
        algorithm: f64,
        oracle: f64,
        abs_err: f64,
        tol: f64,
        metric: ErrorMetric,
    ) -> Self {
        let rel_err = abs_err / oracle.abs().max(f64::MIN_POSITIVE);
        let err = match metric {
            ErrorMetric::Absolute => abs_err,
            ErrorMetric::Relative => rel_err,
        };
        Self { quantity: String::from(quantity), algorithm, oracle, abs_err, rel_err, metric, tol, passed: err <= tol }
    }

    pub fn scalar(quantity: &str, algorithm: f64, oracle: f64, tol: f64, metric: ErrorMetric) -> Self {
        Self::with_error(quantity, algorithm, oracle, (algorithm - oracle).abs(), tol, metric)
    }

    /// Componentwise comparison; the report describes the worst component.
    pub fn compare_vectors(quantity: &str, algorithm: &Vector, oracle: &Vector, tol: f64, metric: ErrorMetric) -> Self {
        assert_eq!(algorithm.len(), oracle.len(), "compared vectors differ in length");
        let mut worst: Option<Self> = None;
        for i in 0..algorithm.len() {
            let r = Self::scalar(quantity, algorithm[i], oracle[i], tol, metric);
            let err = |r: &Self| match metric {
                ErrorMetric::Absolute => r.abs_err,
                ErrorMetric::Relative => r.rel_err,
            };
            if worst.as_ref().is_none_or(|w| err(&r) > err(w) || err(&r).is_nan()) {
                worst = Some(r);
            }
        }
        worst.unwrap_or_else(|| Self::scalar(quantity, 0.0, 0.0, tol, metric))
    }

    pub fn renamed(mut self, quantity: impl Into<String>) -> Self {
        self.quantity = quantity.into();
        self
    }

    /// The report as a single structured log line.
    pub fn line(&self) -> String {
        format!("{self}")
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let metric = match self.metric {
            ErrorMetric::Absolute => "abs",
            ErrorMetric::Relative => "rel",
        };
        write!(
            f,
            "oracle quantity={} metric={} algorithm={:.12e} oracle={:.12e} abs_err={:.3e} rel_err={:.3e} tol={:.1e} result={}",
            self.quantity,
            metric,
            self.algorithm,
            self.oracle,
            self.abs_err,
            self.rel_err,
            self.tol,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dso::DsoProfile;
    use crate::grid::LinearSensitivities;
    use alloc::vec;

    fn single() -> DsoGame {
        let sens = LinearSensitivities::new(
            Matrix::zeros(1, 1),
            Matrix::from_element(1, 1, -0.1),
            Vector::from_element(1, 1.0),
        )
        .unwrap();
        DsoGame::new(vec![DsoProfile::new(1, 0.5, -10.0, 10.0).unwrap()], sens, Vector::zeros(1), 0.1).unwrap()
    }

    fn pair(q_max0: f64) -> DsoGame {
        let sens = LinearSensitivities::new(
            Matrix::from_row_slice(2, 2, &[-0.02, -0.01, -0.01, -0.02]),
            Matrix::from_row_slice(2, 2, &[-0.1, -0.04, -0.04, -0.08]),
            Vector::from_element(2, 1.0),
        )
        .unwrap();
        let profiles =
            vec![DsoProfile::new(1, 0.4, -2.0, q_max0).unwrap(), DsoProfile::new(2, 0.7, -2.0, 2.0).unwrap()];
        DsoGame::new(profiles, sens, Vector::from_vec(vec![1.0, 0.5]), 2.0).unwrap()
    }

    #[test]
    fn single_dso_value() {
        let q = closed_form_ne(&single(), &Vector::from_element(1, 1.05)).unwrap();
        assert!((q[0] - -0.005 / 0.52).abs() < 1e-15);
        assert!((q[0] - -9.6154e-3).abs() < 1e-7);
    }

    #[test]
    fn interior_equals_dense_solve() {
        let game = pair(2.0);
        let v_ref = Vector::from_vec(vec![1.02, 0.99]);
        let q = closed_form_ne(&game, &v_ref).unwrap();
        // Independent route: explicit inverse.
        let inv = game.jacobian().try_inverse().unwrap();
        let expected = inv * (game.base_voltage() - &v_ref) * game.gamma();
        assert!((q - expected).amax() < 1e-12);
    }

    #[test]
    fn active_bound_has_nonnegative_multiplier() {
        // Low reference makes both DSOs want positive demand; cap DSO 0 tightly.
        let game = pair(0.01);
        let v_ref = Vector::from_vec(vec![0.9, 0.9]);
        let q = closed_form_ne(&game, &v_ref).unwrap();
        assert_eq!(q[0], 0.01);
        // At an upper bound the KKT multiplier is -F_0 >= 0.
        let f = game.jacobian() * &q - (game.base_voltage() - &v_ref) * game.gamma();
        assert!(-f[0] >= 0.0);
        assert!(f[1].abs() < 1e-10);
        assert_eq!(saturated(&game, &q, &v_ref), vec![true, false]);
        let s = equilibrium_sensitivity(&game, &q, &v_ref).unwrap();
        assert_eq!(s[(0, 0)], 0.0);
        assert_eq!(s[(0, 1)], 0.0);
        assert_eq!(s[(1, 0)], 0.0);
        assert!((s[(1, 1)] + game.gamma() / game.jacobian()[(1, 1)]).abs() < 1e-12);
    }

    #[test]
    fn verify_ne_flags_non_equilibria() {
        let game = pair(2.0);
        let v_ref = Vector::from_vec(vec![1.02, 0.99]);
        let q = closed_form_ne(&game, &v_ref).unwrap();
        assert!(verify_ne(&game, &q, &v_ref, 1e-9).passed);
        let off = &q + Vector::from_vec(vec![0.05, -0.02]);
        let rep = verify_ne(&game, &off, &v_ref, 1e-9);
        assert!(!rep.passed);
        assert!(rep.abs_err > 0.0);
    }

    #[test]
    fn fd_hypergradient_is_second_order() {
        let game = pair(2.0);
        let pen = VoltagePenalty::new(0.96, 1.04, 100.0).unwrap();
        let v_ref = Vector::from_vec(vec![1.03, 1.01]);
        let g1 = fd_hypergradient(&game, &pen, &v_ref, 1e-3).unwrap();
        let g2 = fd_hypergradient(&game, &pen, &v_ref, 5e-4).unwrap();
        let g4 = fd_hypergradient(&game, &pen, &v_ref, 2.5e-4).unwrap();
        // Smooth point: the differences shrink by about 4x per halving, down to rounding.
        let d1 = (&g1 - &g2).amax();
        let d2 = (&g2 - &g4).amax();
        assert!(d2 <= d1 / 3.0 || d2 < 1e-9, "{d1} {d2}");
    }

    #[test]
    fn report_pass_matches_tolerance() {
        let r = OracleReport::scalar("x", 1.0 + 1e-7, 1.0, 1e-6, ErrorMetric::Absolute);
        assert!(r.passed);
        let r = OracleReport::scalar("x", 1.0 + 1e-5, 1.0, 1e-6, ErrorMetric::Relative);
        assert!(!r.passed);
        assert!(r.line().starts_with("oracle quantity=x metric=rel"));
        assert!(r.line().ends_with("result=FAIL"));
    }
}
