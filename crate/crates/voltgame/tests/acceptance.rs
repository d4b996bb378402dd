//! Acceptance checks for the simulator, one line per criterion.
//!
//! Run with `cargo test -p voltgame --test acceptance`. The process exits
//! nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voltgame::scenario::{data_dir, FIVE_BUS_DISTURBANCE_SCENARIO};
use voltgame::trace::TABLE_FILE;
use voltgame::{bundled_scenario, load_scenario, simulate, ScenarioConfig};
use voltgame_core::grid::linearize;
use voltgame_core::oracle::{closed_form_ne, equilibrium_sensitivity, fd_hypergradient, saturated, verify_ne};
use voltgame_core::tso::hypergradient;
use voltgame_core::{
    AcPlant, Codesign, DsoGame, DsoProfile, GameIterate, GridModel, InnerLoopSettings, LinearPlant,
    LinearSensitivities, LinearizeOptions, Matrix, Plant, PowerFlowOptions, Sequential, TraceRow, Vector,
    VoltagePenalty,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, message: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(message())
    }
}

fn five_bus() -> ScenarioConfig {
    load_scenario(data_dir().join("five_bus.scenario")).expect("bundled scenario loads")
}

fn in_band(v: &Vector, lo: f64, hi: f64) -> bool {
    v.iter().all(|&x| (lo..=hi).contains(&x))
}

fn final_fifth(rows: &[TraceRow]) -> &[TraceRow] {
    &rows[rows.len() - rows.len().div_ceil(5)..]
}

fn voltage_bounds() -> Outcome {
    let config = five_bus();
    let started = Instant::now();
    let run = simulate(&config, &Sequential).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let trace = &run.trace;
    let below = trace.initial_v.iter().filter(|&&v| v < config.v_lo).count();
    ensure(below == 2, || format!("{below} DSO buses start below {}: {}", config.v_lo, trace.initial_v))?;
    let last = trace.last().ok_or("empty trace")?;
    ensure(in_band(&last.v, config.v_lo, config.v_hi), || format!("final voltages {} out of band", last.v))?;
    let tail = final_fifth(&trace.rows);
    if let Some(row) = tail.iter().find(|r| !in_band(&r.v, config.v_lo, config.v_hi)) {
        return Err(format!("voltages {} out of band at k = {}", row.v, row.k));
    }
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    let min = last.v.min();
    Ok(format!(
        "start min {:.4}, final min {min:.4} after {} iterations, last {} rows in band, {:.2} s",
        trace.initial_v.min(),
        trace.rows.len(),
        tail.len(),
        elapsed.as_secs_f64()
    ))
}

fn disturbance() -> Outcome {
    let config = bundled_scenario(FIVE_BUS_DISTURBANCE_SCENARIO).map_err(|e| e.to_string())?;
    let event = config.disturbances.first().copied().ok_or("scenario has no disturbance")?;
    let dso = event.dso - 1;
    let limit = event.q_min;
    ensure(limit == -0.40, || format!("disturbance caps DSO 1 at {limit}, not 40 MVar"))?;
    let started = Instant::now();
    let run = simulate(&config, &Sequential).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let rows = &run.trace.rows;
    let at = event.at_outer_iter;
    ensure(rows.len() > at + 10, || format!("run stopped at {} rows", rows.len()))?;

    let before = &rows[at - 1];
    ensure(before.grad_norm <= 1e-4, || {
        format!("not converged before the disturbance: grad norm {:e}", before.grad_norm)
    })?;
    let pinned_at = rows[at..]
        .iter()
        .find(|r| (r.xi[dso] - limit).abs() <= 1e-9)
        .map(|r| r.k - at)
        .ok_or("DSO 1 never reaches its new limit")?;
    ensure(pinned_at <= 3, || format!("DSO 1 pinned only {pinned_at} iterations after the cap"))?;
    if let Some(r) = rows[at..].iter().find(|r| r.xi[dso] < limit - 1e-12) {
        return Err(format!("DSO 1 demand {} below the cap at k = {}", r.xi[dso], r.k));
    }
    let last = rows.last().unwrap();
    ensure(in_band(&last.v, config.v_lo, config.v_hi), || format!("final voltages {} out of band", last.v))?;

    let tail = final_fifth(rows);
    ensure(tail[0].k > at, || "steady-state window overlaps the disturbance".to_string())?;
    let mean = |i: usize| tail.iter().map(|r| r.payments[i]).sum::<f64>() / tail.len() as f64;
    let after: Vec<f64> = (0..config.dsos.len()).map(mean).collect();
    let others = |p: &[f64]| p.iter().enumerate().filter(|&(i, _)| i != dso).map(|(_, x)| x).sum::<f64>();
    let pre = before.payments.as_slice();
    ensure(after[dso] < pre[dso], || format!("DSO 1 payment {:.4} -> {:.4} did not decrease", pre[dso], after[dso]))?;
    ensure(others(&after) > others(pre), || {
        format!("other payments {:.4} -> {:.4} did not increase", others(pre), others(&after))
    })?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "pinned after {pinned_at} iterations; DSO 1 payment {:.4} -> {:.4}, others {:.4} -> {:.4}, {:.2} s",
        pre[dso],
        after[dso],
        others(pre),
        others(&after),
        elapsed.as_secs_f64()
    ))
}

/// Random game on an affine model with a negative definite `X + diag(X)`.
fn random_game(rng: &mut ChaCha8Rng, n: usize, half_width: Option<f64>) -> DsoGame {
    let a = Matrix::from_fn(n, n, |_, _| rng.gen_range(0.0..1.0));
    let m = &a * a.transpose() + Matrix::identity(n, n) * 0.5;
    let x = -(&m * (rng.gen_range(0.02..0.1) / m.diagonal().max()));
    let r = &x * rng.gen_range(0.1..0.5);
    let v0 = Vector::from_fn(n, |_, _| 1.0 + rng.gen_range(-0.02..0.02));
    let sens = LinearSensitivities::new(r, x, v0).unwrap();
    let p = Vector::from_fn(n, |_, _| rng.gen_range(0.0..1.0));
    let profiles = (0..n)
        .map(|i| {
            let w = half_width.map_or(1e3, |w| rng.gen_range(0.2 * w..w));
            DsoProfile::new(i + 1, rng.gen_range(0.2..0.8), -w, w).unwrap()
        })
        .collect();
    DsoGame::new(profiles, sens, p, rng.gen_range(1.0..20.0)).unwrap()
}

fn random_v_ref(rng: &mut ChaCha8Rng, game: &DsoGame) -> Vector {
    game.base_voltage().map(|v| v + rng.gen_range(-0.05..0.05))
}

fn converge(game: &DsoGame, v_ref: &Vector) -> Result<GameIterate, String> {
    let n = game.n();
    let eta = 0.5 * game.check_conditioning(1.0).eta_max();
    let settings = InnerLoopSettings { eta, sigma: 1e-12, max_iter: 2_000_000 };
    let start = GameIterate::new(Vector::from_fn(n, |i, _| game.profiles()[i].clamp(0.0)), Matrix::zeros(n, n));
    game.run_inner_loop(start, v_ref, &settings, &mut game.linear_plant(), &Sequential)
        .map(|o| o.iterate)
        .map_err(|e| e.to_string())
}

fn nash_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let instances = 60;
    for round in 0..instances {
        let n = [1, 2, 3, 4][round % 4];
        let half_width = ((round / 4) % 2 == 0).then(|| rng.gen_range(0.05..1.0));
        let game = random_game(&mut rng, n, half_width);
        let v_ref = random_v_ref(&mut rng, &game);
        let it = converge(&game, &v_ref)?;
        let q = closed_form_ne(&game, &v_ref).map_err(|e| e.to_string())?;
        let err = (&it.xi - &q).amax();
        ensure(err <= 1e-6, || format!("instance {round}: inf-norm error {err:e}"))?;
        let report = verify_ne(&game, &it.xi, &v_ref, 1e-6);
        ensure(report.passed, || format!("instance {round}: {report}"))?;
        worst = worst.max(err);
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("{instances} instances, worst inf-norm error {worst:.2e}, {:.2} s", elapsed.as_secs_f64()))
}

fn contraction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_margin = f64::NEG_INFINITY;
    let instances = 12;
    for round in 0..instances {
        let n = [1, 2, 3, 4][round % 4];
        let half_width = ((round / 4) % 2 == 0).then(|| rng.gen_range(0.05..1.0));
        let game = random_game(&mut rng, n, half_width);
        let v_ref = random_v_ref(&mut rng, &game);
        let eta = rng.gen_range(0.1..0.95) * game.check_conditioning(1.0).eta_max();
        let theta = game.check_conditioning(eta).theta.ok_or("eta outside the contraction range")?;
        let q = closed_form_ne(&game, &v_ref).map_err(|e| e.to_string())?;
        let mut it = GameIterate::cold(n);
        it.v_meas = game.linear_voltage(&it.xi);
        let mut err = (&it.xi - &q).norm();
        let mut steps = 0;
        while err > 1e-10 && steps < 1_000_000 {
            let mut next = game.inner_step(&it, &v_ref, eta, &Sequential);
            next.v_meas = game.linear_voltage(&next.xi);
            let next_err = (&next.xi - &q).norm();
            let ratio = next_err / err;
            ensure(ratio <= theta + 0.05, || {
                format!("instance {round}, step {steps}: ratio {ratio} > theta {theta} + 0.05")
            })?;
            worst_margin = worst_margin.max(ratio - theta);
            it = next;
            err = next_err;
            steps += 1;
        }
        ensure(err <= 1e-10, || format!("instance {round} did not converge"))?;
    }
    Ok(format!("{instances} instances, max(ratio - theta) = {worst_margin:.2e}"))
}

fn sensitivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut interior, mut with_saturation, mut worst) = (0, 0, 0.0f64);
    for round in 0..60 {
        let n = [2, 3, 4][round % 3];
        let half_width = (round % 2 == 0).then(|| rng.gen_range(0.05..0.5));
        let game = random_game(&mut rng, n, half_width);
        let v_ref = random_v_ref(&mut rng, &game);
        let it = converge(&game, &v_ref)?;
        let q = closed_form_ne(&game, &v_ref).map_err(|e| e.to_string())?;
        let pinned = saturated(&game, &q, &v_ref);
        if pinned.iter().all(|&p| !p) {
            let expected = game.jacobian().try_inverse().ok_or("singular Jacobian")? * -game.gamma();
            let err = (&it.s - &expected).norm();
            ensure(err <= 1e-6, || format!("instance {round}: Frobenius error {err:e}"))?;
            worst = worst.max(err);
            interior += 1;
        } else {
            let expected = equilibrium_sensitivity(&game, &q, &v_ref).map_err(|e| e.to_string())?;
            let err = (&it.s - &expected).norm();
            ensure(err <= 1e-6, || format!("instance {round}: Frobenius error {err:e} with saturation"))?;
            for (i, _) in pinned.iter().enumerate().filter(|(_, &p)| p) {
                ensure(it.s.row(i).iter().all(|&x| x == 0.0), || format!("instance {round}: row {i} not zero"))?;
            }
            with_saturation += 1;
        }
    }
    ensure(interior >= 10 && with_saturation >= 10, || {
        format!("only {interior} interior and {with_saturation} saturated instances")
    })?;
    Ok(format!(
        "{interior} interior instances (worst {worst:.2e}), {with_saturation} with zero rows for saturated DSOs"
    ))
}

fn hypergradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut points, mut attempts, mut worst) = (0, 0, 0.0f64);
    while points < 25 {
        attempts += 1;
        ensure(attempts < 10_000, || format!("only {points} interior points found"))?;
        let n = [2, 3, 4][rng.gen_range(0..3)];
        let half_width = rng.gen_range(0.5..3.0);
        let game = random_game(&mut rng, n, Some(half_width));
        let v_ref = random_v_ref(&mut rng, &game);
        let mid = game.base_voltage().mean();
        let (lo, hi, rho) = (mid - rng.gen_range(0.0..0.03), mid + rng.gen_range(0.0..0.03), rng.gen_range(10.0..1e3));
        let pen = VoltagePenalty::new(lo, hi, rho).map_err(|e| e.to_string())?;
        let Ok(q) = closed_form_ne(&game, &v_ref) else { continue };
        let v = game.linear_voltage(&q);
        let inside = (0..n).all(|i| {
            let p = &game.profiles()[i];
            q[i] - p.q_min > 1e-3 && p.q_max - q[i] > 1e-3
        });
        let smooth = v.iter().all(|&x| (x - lo).abs() > 1e-3 && (x - hi).abs() > 1e-3);
        if !inside || !smooth {
            continue;
        }
        let fd = fd_hypergradient(&game, &pen, &v_ref, 1e-5).map_err(|e| e.to_string())?;
        if fd.iter().any(|g| g.abs() <= 1e-3) {
            continue;
        }
        let it = converge(&game, &v_ref)?;
        let v = game.linear_voltage(&it.xi);
        let hg =
            hypergradient(&v_ref, &v, &it.xi, &it.s, game.sens().x(), game.gamma(), &pen).map_err(|e| e.to_string())?;
        for i in 0..n {
            let rel = (hg.grad[i] - fd[i]).abs() / fd[i].abs();
            ensure(rel <= 1e-4, || format!("point {points}, component {i}: relative error {rel:e}"))?;
            worst = worst.max(rel);
        }
        points += 1;
    }
    Ok(format!("{points} interior points, worst relative error {worst:.2e}"))
}

fn conditioning_gate() -> Outcome {
    let config = five_bus();
    let codesign = Codesign::new(config.to_problem().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let bundled = *codesign.conditioning();
    ensure(bundled.mu > 0.0 && !bundled.violated(), || format!("bundled mu = {}", bundled.mu))?;

    // Three DSOs on a strongly coupled mesh: every pair shares a path whose
    // reactance outweighs the local one, so X~ has a positive eigenvalue.
    let x = Matrix::from_row_slice(3, 3, &[-0.1, 0.2, 0.2, 0.2, -0.1, 0.2, 0.2, 0.2, -0.1]);
    let x_tilde = &x + Matrix::from_diagonal(&x.diagonal());
    let lambda = x_tilde.clone().symmetric_eigen().eigenvalues.max();
    let costs = [0.4, 0.6, 0.5];
    let c_min = 0.4;
    let expected = c_min / lambda;
    let game_at = |gamma: f64| {
        let sens = LinearSensitivities::new(Matrix::zeros(3, 3), x.clone(), Vector::from_element(3, 1.0)).unwrap();
        let profiles = costs.iter().enumerate().map(|(i, &c)| DsoProfile::new(i + 1, c, -1.0, 1.0).unwrap()).collect();
        DsoGame::new(profiles, sens, Vector::zeros(3), gamma).unwrap()
    };
    let below = game_at(0.9 * expected).check_conditioning(1e-3);
    ensure(lambda > 0.0, || format!("lambda_max(X~) = {lambda}"))?;
    ensure((below.lambda_max_x_tilde - lambda).abs() <= 1e-12, || format!("lambda_max {}", below.lambda_max_x_tilde))?;
    ensure((below.gamma_max - expected).abs() <= 1e-9 * expected, || {
        format!("gamma_max {} vs c_min / lambda_max = {expected}", below.gamma_max)
    })?;
    ensure(!below.exceeds_gamma_max() && !below.violated(), || "flagged below the bound".to_string())?;
    let above = game_at(1.5 * expected).check_conditioning(1e-3);
    ensure(above.exceeds_gamma_max(), || "tariff above gamma_max not flagged".to_string())?;
    ensure(above.violated() && above.theta.is_none(), || format!("mu = {} above the bound", above.mu))?;
    Ok(format!(
        "bundled mu {:.4}; synthetic gamma_max {:.4} = {c_min} / {lambda:.4}, mu {:.3} above it",
        bundled.mu, below.gamma_max, above.mu
    ))
}

/// Largest active or reactive power mismatch of `sol`, recomputed from the
/// admittance matrix rather than taken from the solver.
fn ac_residual(grid: &GridModel, p: &Vector, q: &Vector, sol: &voltgame_core::PowerFlowSolution) -> f64 {
    let (g, b) = grid.admittance();
    let (v, th) = (&sol.v, &sol.theta);
    let mut worst: f64 = 0.0;
    for (a, &i) in grid.pq_buses().iter().enumerate() {
        let (mut pi, mut qi) = (0.0, 0.0);
        for k in 0..grid.n_bus() {
            let d = th[i] - th[k];
            pi += v[i] * v[k] * (g[(i, k)] * d.cos() + b[(i, k)] * d.sin());
            qi += v[i] * v[k] * (g[(i, k)] * d.sin() - b[(i, k)] * d.cos());
        }
        worst = worst.max((pi + p[a]).abs()).max((qi + q[a]).abs());
    }
    worst
}

fn plant_fidelity() -> Outcome {
    let problem = five_bus().to_problem().map_err(|e| e.to_string())?;
    let grid = problem.grid.clone();
    let positions: Vec<usize> = problem.profiles.iter().map(|d| grid.pq_position(d.bus).unwrap()).collect();
    let n = positions.len();
    let full = linearize(&grid, &problem.p, &Vector::zeros(grid.n_pq()), &LinearizeOptions::default())
        .map_err(|e| e.to_string())?;
    let sens = full.restrict(&positions, &problem.p).map_err(|e| e.to_string())?;
    let p_dso = Vector::from_iterator(n, positions.iter().map(|&i| problem.p[i]));
    let mut lin = LinearPlant::new(sens, p_dso).map_err(|e| e.to_string())?;
    let mut ac = AcPlant::new(grid.clone(), problem.p.clone(), positions.clone(), PowerFlowOptions::default())
        .map_err(|e| e.to_string())?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut samples: Vec<Vector> = Vec::new();
    for i in 0..n {
        for delta in [-0.05, -0.025, 0.025, 0.05] {
            let mut xi = Vector::zeros(n);
            xi[i] = delta;
            samples.push(xi);
        }
    }
    samples.extend((0..50).map(|_| Vector::from_fn(n, |_, _| rng.gen_range(-0.05..=0.05))));
    let (mut worst, mut worst_residual) = (0.0f64, 0.0f64);
    for xi in &samples {
        let v_ac = ac.measure(xi).map_err(|e| e.to_string())?;
        let v_lin = lin.measure(xi).map_err(|e| e.to_string())?;
        let err = (&v_ac - &v_lin).amax();
        ensure(err < 1e-3, || format!("deviation {err:e} at xi = {xi}"))?;
        let mut q = Vector::zeros(grid.n_pq());
        for (i, &pos) in positions.iter().enumerate() {
            q[pos] = xi[i];
        }
        let residual = ac_residual(&grid, &problem.p, &q, ac.last_solution().unwrap());
        ensure(residual <= 1e-8, || format!("AC residual {residual:e} at xi = {xi}"))?;
        worst = worst.max(err);
        worst_residual = worst_residual.max(residual);
    }
    Ok(format!(
        "{} perturbations, worst deviation {worst:.2e} p.u., worst AC residual {worst_residual:.2e}",
        samples.len()
    ))
}

fn run_cli(out: &Path, threads: usize) -> Result<Vec<u8>, String> {
    let scenario = data_dir().join("five_bus.scenario");
    let status = Command::new(env!("CARGO_BIN_EXE_voltgame"))
        .arg("run")
        .arg(&scenario)
        .arg("--out")
        .arg(out)
        .arg("--threads")
        .arg(threads.to_string())
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || {
        format!("run with {threads} thread(s) failed: {}", String::from_utf8_lossy(&status.stderr))
    })?;
    std::fs::read(out.join(TABLE_FILE)).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = run_cli(&dir.path().join("a"), 1)?;
    let second = run_cli(&dir.path().join("b"), 1)?;
    let pooled = run_cli(&dir.path().join("c"), 4)?;
    ensure(first == second, || "two sequential runs differ".to_string())?;
    ensure(first == pooled, || "the 4-thread run differs from the sequential run".to_string())?;
    Ok(format!("3 runs (1, 1 and 4 threads), identical {}-byte tables", first.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("voltage bounds", voltage_bounds),
        ("disturbance", disturbance),
        ("nash oracle", nash_oracle),
        ("contraction rate", contraction),
        ("sensitivity", sensitivity),
        ("hypergradient", hypergradient_check),
        ("conditioning gate", conditioning_gate),
        ("plant fidelity", plant_fidelity),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail} [{secs:.2} s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail} [{secs:.2} s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
