//! The `voltgame` command line.
//!
//! Exit codes: 0 on success, 1 for unreadable or invalid input, 2 when the
//! numerics fail (stalled inner loop, infeasible power flow, ill-posed game)
//! and 3 when an oracle check fails.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use voltgame_core::{Codesign, CodesignError, StepSchedule};

use crate::error::{ScenarioError, TraceError};
use crate::parallel::Executor;
use crate::scenario::{bundled_scenario, load_scenario, ScenarioConfig, FIVE_BUS_DISTURBANCE_SCENARIO};
use crate::trace::{write_trace, Summary};
use crate::verify::{verify_scenario, VerifyError};

/// Environment variable that overrides the default output directory.
pub const OUT_DIR_ENV: &str = "VOLTGAME_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "voltgame-out";

#[derive(Debug, Parser)]
#[command(name = "voltgame", version, about = "Incentive co-design between a TSO and DSOs providing reactive power")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the full co-design loop and write the trace.
    Run {
        scenario: PathBuf,
        /// Output directory (default: $VOLTGAME_OUT_DIR, then ./voltgame-out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for the per-DSO updates.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Run one inner loop at the initial incentive and print the
    /// equilibrium and its sensitivity.
    Inner { scenario: PathBuf },
    /// Print the conditioning report of the scenario's game.
    Check { scenario: PathBuf },
    /// Run the oracle suite; fails if any check fails.
    Verify { scenario: PathBuf },
    /// Run the bundled 40 MVar disturbance scenario.
    DisturbDemo {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Numerical(#[from] CodesignError),
    #[error("{0}")]
    Verify(VerifyError),
    #[error("{failed} oracle check(s) failed")]
    OracleFailed { failed: usize },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Scenario(_) | CliError::Usage(_) | CliError::Trace(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Verify(VerifyError::Config(_)) => 1,
            CliError::Verify(_) => 2,
            CliError::OracleFailed { .. } => 3,
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        CliError::Verify(e)
    }
}

impl From<crate::ValidationError> for CliError {
    fn from(e: crate::ValidationError) -> Self {
        CliError::Scenario(e.into())
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to stderr.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn executor(threads: usize) -> Result<Executor, CliError> {
    if threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    Executor::with_threads(threads).map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { scenario, out, threads } => {
            let config = load_scenario(&scenario)?;
            run(&config, &scenario.display().to_string(), &resolve_out_dir(out), threads)
        }
        Command::DisturbDemo { out, threads } => {
            let config = bundled_scenario(FIVE_BUS_DISTURBANCE_SCENARIO)?;
            run(&config, "five_bus_disturbance.scenario", &resolve_out_dir(out), threads)
        }
        Command::Inner { scenario } => inner(&load_scenario(&scenario)?),
        Command::Check { scenario } => check(&load_scenario(&scenario)?),
        Command::Verify { scenario } => verify(&load_scenario(&scenario)?),
    }
}

/// Runs the loop and writes the trace, including a partial trace when the
/// run aborts.
pub fn run(config: &ScenarioConfig, name: &str, out_dir: &Path, threads: usize) -> Result<(), CliError> {
    let pool = executor(threads)?;
    let codesign = Codesign::new(config.to_problem()?)?;
    let conditioning = *codesign.conditioning();
    let oracle = verify_scenario(config, &pool)?;
    let band = (config.v_lo, config.v_hi);
    match codesign.run(&pool) {
        Ok(trace) => {
            let summary = Summary::new(name, &trace, band, &conditioning, &oracle.reports);
            let files = write_trace(&trace, &summary, out_dir)?;
            println!("outer iterations: {}", trace.rows.len());
            println!("converged:        {}", trace.converged);
            if let Some(last) = trace.last() {
                println!("final voltages:   {:?}", last.v.as_slice());
                println!("final payments:   {:?}", last.payments.as_slice());
            }
            println!("in band:          {}", summary.final_voltages_in_band);
            println!("trace:            {}", files.table.display());
            println!("summary:          {}", files.summary.display());
            Ok(())
        }
        Err(err) => {
            if let Some(trace) = err.partial_trace() {
                let mut summary = Summary::new(name, trace, band, &conditioning, &oracle.reports);
                summary.failure = Some(err.to_string());
                let files = write_trace(trace, &summary, out_dir)?;
                eprintln!("partial trace written to {}", files.table.display());
            }
            Err(err.into())
        }
    }
}

fn inner(config: &ScenarioConfig) -> Result<(), CliError> {
    let mut problem = config.to_problem()?;
    problem.settings.sigma = StepSchedule::Constant { value: 1e-10 };
    problem.settings.inner_max_iter = problem.settings.inner_max_iter.max(1_000_000);
    let v_ref = problem.settings.v_ref_init.clone();
    let mut codesign = Codesign::new(problem)?;
    // One outer step runs the inner loop at v_ref_init and records the
    // outcome before the incentive moves.
    let row = codesign.step(&voltgame_core::Sequential)?.clone();
    let s = &codesign.iterate().s;
    println!("v_ref:        {:?}", v_ref.as_slice());
    println!("iterations:   {}", row.inner_iters);
    println!("equilibrium:  {:?}", row.xi.as_slice());
    println!("voltages:     {:?}", row.v.as_slice());
    println!("payments:     {:?}", row.payments.as_slice());
    println!("sensitivity (row i = d xi_i / d v_ref):");
    for i in 0..s.nrows() {
        println!("  {:?}", s.row(i).iter().collect::<Vec<_>>());
    }
    Ok(())
}

fn check(config: &ScenarioConfig) -> Result<(), CliError> {
    let codesign = Codesign::new(config.to_problem()?);
    let c = match codesign {
        Ok(c) => *c.conditioning(),
        Err(CodesignError::IllConditioned(c)) => {
            print_conditioning(&c);
            return Err(CodesignError::IllConditioned(c).into());
        }
        Err(e) => return Err(e.into()),
    };
    print_conditioning(&c);
    Ok(())
}

fn print_conditioning(c: &voltgame_core::GameConditioning) {
    println!("mu          {:.6e}", c.mu);
    println!("L_F         {:.6e}", c.l_f);
    println!("eta         {:.6e}", c.eta);
    println!("eta_max     {:.6e}", c.eta_max());
    match c.theta {
        Some(theta) => println!("theta       {theta:.9}"),
        None => println!("theta       none (eta outside the contraction range)"),
    }
    if c.gamma_max.is_finite() {
        println!("gamma_max   {:.6e}", c.gamma_max);
    } else {
        println!("gamma_max   unbounded (lambda_max(X~) = {:.6e} < 0)", c.lambda_max_x_tilde);
    }
    println!("well posed  {}", !c.violated());
}

fn verify(config: &ScenarioConfig) -> Result<(), CliError> {
    let outcome = verify_scenario(config, &voltgame_core::Sequential)?;
    for r in &outcome.reports {
        println!("{r}");
    }
    let failed = outcome.reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        Err(CliError::OracleFailed { failed })
    } else {
        Ok(())
    }
}
