#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use voltgame_core::{DsoGame, DsoProfile, GridModel, Line, LinearSensitivities, Matrix, Vector};

/// Symmetric matrix with negative diagonal and negative definite `X + diag(X)`.
pub fn random_reactance(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let a = Matrix::from_fn(n, n, |_, _| rng.gen_range(0.0..1.0));
    let m = &a * a.transpose() + Matrix::identity(n, n) * 0.5;
    let scale = rng.gen_range(0.02..0.1) / m.diagonal().max();
    -m * scale
}

/// Random game on an affine model. `half_width` bounds each DSO's box
/// around zero; `None` leaves the boxes wide open.
pub fn random_game(rng: &mut ChaCha8Rng, n: usize, half_width: Option<f64>) -> DsoGame {
    let x = random_reactance(rng, n);
    let r = &x * rng.gen_range(0.1..0.5);
    let v0 = Vector::from_fn(n, |_, _| 1.0 + rng.gen_range(-0.02..0.02));
    let sens = LinearSensitivities::new(r, x, v0).unwrap();
    let p = Vector::from_fn(n, |_, _| rng.gen_range(0.0..1.0));
    let profiles = (0..n)
        .map(|i| {
            let c = rng.gen_range(0.2..0.8);
            let w = half_width.map_or(1e3, |w| rng.gen_range(0.2 * w..w));
            DsoProfile::new(i + 1, c, -w, w).unwrap()
        })
        .collect();
    let gamma = rng.gen_range(1.0..20.0);
    DsoGame::new(profiles, sens, p, gamma).unwrap()
}

/// A reference within a few percent of the no-demand voltages.
pub fn random_v_ref(rng: &mut ChaCha8Rng, game: &DsoGame) -> Vector {
    game.base_voltage().map(|v| v + rng.gen_range(-0.05..0.05))
}

/// Step size in the middle of the contraction range.
pub fn safe_eta(game: &DsoGame) -> f64 {
    0.5 * game.check_conditioning(1.0).eta_max()
}

/// Five-bus meshed transmission case, zero-based, slack at index 3. Active
/// demand of 7 p.u. at indices 1 and 2 pulls their voltages below 0.96.
pub fn five_bus() -> GridModel {
    let line = |from, to, r, x, b| Line { from, to, r, x, b };
    let lines = vec![
        line(0, 1, 0.00281, 0.0281, 0.00712),
        line(0, 3, 0.00304, 0.0304, 0.00658),
        line(0, 4, 0.00064, 0.0064, 0.03126),
        line(1, 2, 0.00108, 0.0108, 0.01852),
        line(2, 3, 0.00297, 0.0297, 0.00674),
        line(3, 4, 0.00297, 0.0297, 0.00674),
    ];
    GridModel::new(5, 3, lines, 100.0, 230.0, 1.0).unwrap()
}

/// Active demand on the non-slack buses of [`five_bus`], in position order.
pub fn five_bus_load() -> Vector {
    Vector::from_vec(vec![0.0, 7.0, 7.0, 0.0])
}
