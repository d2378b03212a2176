//! Command-line front end: episode simulation, trace export and the
//! numeric verification suites.
//!
//! Exit codes: 0 success, 1 a check failed (or an episode did not
//! converge), 2 usage or configuration error.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use aeroservo::sim::{parse_trace_csv, run_guidance, EpisodeStatus};
use aeroservo::verify::{
    gradcheck, jacobian_check, match_bench, mnn_one_to_one_violations, solve_bench, SOLVE_ROTATION_TOL_DEG,
    SOLVE_TRANSLATION_TOL,
};
use aeroservo::Error;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use log::{debug, info, warn, LevelFilter};

pub use config::{parse_config, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Bound on the finite-difference Jacobian error.
pub const JACOBIAN_TOL: f64 = 1e-5;
/// Bound on the relative loss-gradient error.
pub const GRADIENT_TOL: f64 = 1e-4;
/// Fraction of the planted permutation `match-bench` must recover.
pub const MIN_RECOVERY: f64 = 0.99;
/// Fraction of seeds per outlier level `solve-bench` must solve.
pub const MIN_SOLVE_RATE: f64 = 0.99;
/// Random confidence matrices checked for the one-to-one property.
pub const MNN_TRIALS: usize = 1000;

/// Columns written by `traces`.
pub const TRACE_HEADER: &str = "t,vx,vy,vz,wz,theta_err,ep_norm";

#[derive(Debug, Parser)]
#[command(name = "aeroservo", version, about = "Aerial-manipulator servo simulator and verification suites")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `sim.seed`.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output file; overrides `output.path`. Reports go to stdout otherwise.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one guidance episode and write its CSV log.
    Simulate,
    /// Planted-permutation recovery of score, dual softmax and MNN.
    MatchBench,
    /// Robust pose recovery under a sweep of outlier fractions.
    SolveBench,
    /// Compare the generalized Jacobian against finite differences.
    JacobianCheck,
    /// Compare the analytic loss gradients against finite differences.
    Gradcheck,
    /// Re-emit the velocity and error columns of an episode log.
    Traces {
        /// Episode CSV; defaults to `output.path`.
        input: Option<PathBuf>,
    },
    /// Print the effective configuration.
    Config,
}

/// Maps `AEROSERVO_LOG` to a level; unset means warnings only.
pub fn log_level(value: Option<&str>) -> Option<LevelFilter> {
    match value.map(str::trim) {
        None | Some("") => Some(LevelFilter::Warn),
        Some("quiet") => Some(LevelFilter::Off),
        Some("info") => Some(LevelFilter::Info),
        Some("debug") => Some(LevelFilter::Debug),
        Some(_) => None,
    }
}

fn init_logging() {
    let raw = std::env::var("AEROSERVO_LOG").ok();
    let level = log_level(raw.as_deref());
    let _ = env_logger::Builder::new()
        .filter_level(level.unwrap_or(LevelFilter::Warn))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
    if level.is_none() {
        warn!("ignoring AEROSERVO_LOG={:?}; expected quiet, info or debug", raw.unwrap_or_default());
    }
}

/// Failure modes that map to exit codes.
enum Failure {
    Usage(String),
    Check,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn read_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text =
        std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = read_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.sim.seed = seed;
    }
    if cli.out.is_some() {
        cfg.output = cli.out.clone();
    }
    Ok(cfg)
}

/// Writes `text` to `path`, or stdout when there is none.
fn emit(text: &str, path: Option<&Path>) -> Outcome {
    match path {
        Some(p) => {
            std::fs::write(p, text).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", p.display())))?;
            info!("wrote {}", p.display());
        }
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            match stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()) {
                // A closed reader (e.g. `| head`) is not an error.
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                    return Err(Failure::Usage(format!("cannot write to stdout: {e}")));
                }
                _ => {}
            }
        }
    }
    Ok(())
}

fn verdict(report: &mut String, ok: bool) -> Outcome {
    let _ = writeln!(report, "result: {}", if ok { "PASS" } else { "FAIL" });
    if ok {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn simulate(cfg: &RunConfig) -> Outcome {
    let log = run_guidance(&cfg.sim)?;
    let last = log.last();
    info!(
        "{:?} after {} steps, theta {:.3e} rad, |ep| {:.3e} m",
        log.status,
        log.steps(),
        last.map_or(f64::NAN, |r| r.theta_err),
        last.map_or(f64::NAN, |r| r.ep_norm)
    );
    if log.joint_clamped {
        warn!("a joint hit its limit during the episode");
    }
    emit(&log.to_csv(), cfg.output.as_deref())?;
    match log.status {
        EpisodeStatus::Converged => Ok(()),
        EpisodeStatus::NotConverged => {
            warn!("episode did not converge within {} steps", cfg.sim.max_steps);
            Err(Failure::Check)
        }
    }
}

fn run_match_bench(cfg: &RunConfig) -> Outcome {
    let m = &cfg.matching;
    let b = &cfg.bench;
    let r = match_bench(m.keypoints, m.feature_dim, b.feature_sigma, m.tau, m.theta_c, b.trials, cfg.sim.seed)?;
    let violations = mnn_one_to_one_violations(MNN_TRIALS, cfg.sim.seed);
    let mut out = String::new();
    let _ = writeln!(out, "match-bench: n = {}, d = {}, sigma = {}, tau = {}, theta_c = {}", m.keypoints, m.feature_dim, b.feature_sigma, m.tau, m.theta_c);
    let _ = writeln!(out, "trials: {}", r.trials);
    let _ = writeln!(out, "min recovery: {:.4}", r.min_recovery);
    let _ = writeln!(out, "mean recovery: {:.4}", r.mean_recovery);
    let _ = writeln!(out, "wrong matches: {}", r.wrong_matches);
    let _ = writeln!(out, "confidences in (0,1): {}", r.confidences_in_open_unit);
    let _ = writeln!(out, "one-to-one violations: {violations} of {MNN_TRIALS}");
    let ok = r.min_recovery >= MIN_RECOVERY && r.confidences_in_open_unit && violations == 0;
    let status = verdict(&mut out, ok);
    emit(&out, cfg.output.as_deref())?;
    status
}

fn run_solve_bench(cfg: &RunConfig) -> Outcome {
    let b = &cfg.bench;
    let rows = solve_bench(
        b.correspondences,
        &b.outlier_fractions,
        b.keypoint_sigma,
        b.seeds,
        &cfg.sim.tracker.solve,
    )?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "solve-bench: n = {}, sigma = {}, success = rotation < {SOLVE_ROTATION_TOL_DEG} deg and translation < {SOLVE_TRANSLATION_TOL} m",
        b.correspondences, b.keypoint_sigma
    );
    let _ = writeln!(out, "outlier_fraction,seeds,successes,worst_rotation_deg,worst_translation_m");
    let mut ok = true;
    for r in &rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.5},{:.3e}",
            r.outlier_fraction, r.seeds, r.successes, r.worst_rotation_deg, r.worst_translation
        );
        ok &= r.successes as f64 >= MIN_SOLVE_RATE * r.seeds as f64;
    }
    let status = verdict(&mut out, ok);
    emit(&out, cfg.output.as_deref())?;
    status
}

fn run_jacobian_check(cfg: &RunConfig) -> Outcome {
    let r = jacobian_check(&cfg.sim.arm, cfg.bench.jacobian_states, cfg.sim.seed)?;
    let mut out = String::new();
    let _ = writeln!(out, "jacobian-check: {} random states", r.states);
    let _ = writeln!(out, "max relative error: {:.3e} (state {})", r.max_relative_error, r.worst_state);
    let status = verdict(&mut out, r.max_relative_error < JACOBIAN_TOL);
    emit(&out, cfg.output.as_deref())?;
    status
}

fn run_gradcheck(cfg: &RunConfig) -> Outcome {
    let r = gradcheck(cfg.bench.grad_cases, cfg.sim.seed)?;
    let mut out = String::new();
    let _ = writeln!(out, "gradcheck: {} cases per loss", r.cases);
    for (name, v) in [
        ("aux", r.aux),
        ("mvc", r.mvc),
        ("translation", r.translation),
        ("rotation", r.rotation),
        ("matching", r.matching),
    ] {
        let _ = writeln!(out, "{name}: {v:.3e}");
    }
    let _ = writeln!(out, "max relative error: {:.3e}", r.max());
    let status = verdict(&mut out, r.max() < GRADIENT_TOL);
    emit(&out, cfg.output.as_deref())?;
    status
}

/// Velocity and error columns of an episode CSV.
pub fn trace_columns(csv: &str) -> aeroservo::Result<String> {
    let rows = parse_trace_csv(csv)?;
    let mut out = String::with_capacity(48 * (rows.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let [vx, vy, vz, wz] = r.vehicle_cmd;
        let _ = writeln!(out, "{},{vx},{vy},{vz},{wz},{},{}", r.t, r.theta_err, r.ep_norm);
    }
    Ok(out)
}

fn traces(cli: &Cli, input: Option<&Path>) -> Outcome {
    // `--out` names the destination here, so the input falls back to the
    // configured path only.
    let input = match input {
        Some(p) => Some(p.to_path_buf()),
        None => read_config(cli.config.as_deref())?.output,
    };
    let input = input
        .ok_or_else(|| Failure::Usage("traces needs an input CSV or output.path in the config".into()))?;
    let text = std::fs::read_to_string(&input)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", input.display())))?;
    let out = trace_columns(&text).map_err(|e| Failure::Usage(format!("{}: {e}", input.display())))?;
    emit(&out, cli.out.as_deref())
}

fn dispatch(cli: &Cli) -> Outcome {
    if let Command::Traces { input } = &cli.command {
        return traces(cli, input.as_deref());
    }
    let cfg = load_config(cli)?;
    debug!("effective configuration:\n{}", cfg.serialize());
    match &cli.command {
        Command::Simulate => simulate(&cfg),
        Command::MatchBench => run_match_bench(&cfg),
        Command::SolveBench => run_solve_bench(&cfg),
        Command::JacobianCheck => run_jacobian_check(&cfg),
        Command::Gradcheck => run_gradcheck(&cfg),
        Command::Config => emit(&cfg.serialize(), cli.out.as_deref()),
        Command::Traces { .. } => unreachable!("handled above"),
    }
}

/// Runs one invocation; `argv[0]` is the program name.
pub fn run_command(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    init_logging();
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Check) => EXIT_CHECK_FAILED,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
    }
}
