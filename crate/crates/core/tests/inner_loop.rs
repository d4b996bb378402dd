//! The online inner loop against the closed-form equilibrium and its
//! implicit sensitivity, on randomized affine instances.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voltgame_core::oracle::{closed_form_ne, equilibrium_sensitivity, saturated, verify_ne};
use voltgame_core::{DsoGame, GameIterate, InnerLoopSettings, Matrix, Sequential, Vector};

fn converge(game: &DsoGame, v_ref: &Vector, eta: f64) -> GameIterate {
    let n = game.n();
    let settings = InnerLoopSettings { eta, sigma: 1e-12, max_iter: 2_000_000 };
    let start = GameIterate::new(Vector::from_fn(n, |i, _| game.profiles()[i].clamp(0.0)), Matrix::zeros(n, n));
    game.run_inner_loop(start, v_ref, &settings, &mut game.linear_plant(), &Sequential)
        .expect("inner loop converges on a well-posed instance")
        .iterate
}

#[test]
fn agrees_with_closed_form_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut instances = 0;
    let mut with_saturation = 0;
    for round in 0..60 {
        let n = [1, 2, 4][round % 3];
        let half_width = if round % 2 == 0 { Some(rng.gen_range(0.05..1.0)) } else { None };
        let game = common::random_game(&mut rng, n, half_width);
        let v_ref = common::random_v_ref(&mut rng, &game);
        let it = converge(&game, &v_ref, common::safe_eta(&game));
        let q = closed_form_ne(&game, &v_ref).unwrap();
        let err = (&it.xi - &q).amax();
        assert!(err <= 1e-6, "instance {round}: |xi - q*|_inf = {err:e}");
        let report = verify_ne(&game, &it.xi, &v_ref, 1e-6);
        assert!(report.passed, "instance {round}: {report}");

        let pinned = saturated(&game, &q, &v_ref);
        let s_ref = equilibrium_sensitivity(&game, &q, &v_ref).unwrap();
        let s_err = (&it.s - &s_ref).norm();
        assert!(s_err <= 1e-6, "instance {round}: sensitivity error {s_err:e}");
        for (i, &p) in pinned.iter().enumerate() {
            if p {
                assert!(it.s.row(i).iter().all(|&x| x == 0.0), "instance {round}: row {i} of a saturated DSO");
            }
        }
        with_saturation += pinned.iter().any(|&p| p) as usize;
        instances += 1;
    }
    assert!(instances >= 50);
    assert!(with_saturation >= 5, "only {with_saturation} instances exercised a saturated DSO");
}

#[test]
fn interior_sensitivity_is_the_implicit_derivative() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for round in 0..20 {
        let n = [2, 3, 4][round % 3];
        let game = common::random_game(&mut rng, n, None);
        let v_ref = common::random_v_ref(&mut rng, &game);
        let it = converge(&game, &v_ref, common::safe_eta(&game));
        let expected = game.jacobian().try_inverse().unwrap() * -game.gamma();
        assert!((&it.s - &expected).norm() <= 1e-6, "instance {round}");
    }
}

#[test]
fn error_contracts_at_the_predicted_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for round in 0..12 {
        let n = [1, 2, 4][round % 3];
        let half_width = if round % 2 == 0 { Some(rng.gen_range(0.05..1.0)) } else { None };
        let game = common::random_game(&mut rng, n, half_width);
        let v_ref = common::random_v_ref(&mut rng, &game);
        let cond = game.check_conditioning(1.0);
        let eta = rng.gen_range(0.2..0.95) * cond.eta_max();
        let theta = game.check_conditioning(eta).theta.expect("eta inside the contraction range");
        let q = closed_form_ne(&game, &v_ref).unwrap();

        let mut it = GameIterate::cold(n);
        it.v_meas = game.linear_voltage(&it.xi);
        let mut err = (&it.xi - &q).norm();
        let mut steps = 0;
        while err > 1e-10 && steps < 1_000_000 {
            let mut next = game.inner_step(&it, &v_ref, eta, &Sequential);
            next.v_meas = game.linear_voltage(&next.xi);
            let next_err = (&next.xi - &q).norm();
            assert!(
                next_err <= (theta + 0.05) * err,
                "instance {round}, step {steps}: ratio {} > theta {theta}",
                next_err / err
            );
            it = next;
            err = next_err;
            steps += 1;
        }
        assert!(err <= 1e-10, "instance {round} did not converge");
    }
}

#[test]
fn warm_start_at_equilibrium_stops_immediately() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let game = common::random_game(&mut rng, 3, None);
    let v_ref = common::random_v_ref(&mut rng, &game);
    let eta = common::safe_eta(&game);
    let it = converge(&game, &v_ref, eta);
    let settings = InnerLoopSettings { eta, sigma: 1e-9, max_iter: 10 };
    let again = game.run_inner_loop(it, &v_ref, &settings, &mut game.linear_plant(), &Sequential).unwrap();
    assert_eq!(again.iterations, 1);
}
