//! Command-line front end for the aerograsp stack: single runs, controller
//! comparisons, attitude time-constant identification, the QP self-test, and
//! bundled-scenario verification.
//!
//! Exit codes: 0 on success, 1 when a valid configuration ran and failed
//! (simulation fault, failed check), 2 on unusable input (bad flags, bad
//! scenario or log file). clap's own argument errors also exit with 2.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use aerograsp_core::{
    bless, compare, csv_string, identify_time_constants, reference_solve_box, run, solve,
    verify_bundle, CompareReport, ControllerKind, NmpcError, QpProblem, QpStatus, Scenario,
    SysIdSample, KKT_TOL,
};

#[derive(Parser)]
#[command(name = "aerograsp", about = "Quadrotor aerial-grasping simulation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario under one controller; write the log CSV and metrics.
    Simulate {
        /// Scenario file (TOML, schema = 1).
        #[arg(long)]
        scenario: PathBuf,
        /// Controller: dompc, nmpc, or pid. Defaults to the scenario's choice.
        #[arg(long)]
        controller: Option<String>,
        /// Output directory; created if absent.
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one scenario under several controllers with the same seed and
    /// write side-by-side tables plus per-run logs and error series.
    Compare {
        /// Scenario file (TOML, schema = 1).
        #[arg(long)]
        scenario: PathBuf,
        /// Comma-separated controller list.
        #[arg(long, value_delimiter = ',', default_value = "dompc,nmpc,pid")]
        controllers: Vec<String>,
        /// Output directory; created if absent.
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit first-order attitude time constants from a flight log CSV.
    Sysid {
        /// Log with columns t, phi_cmd, theta_cmd and either phi/theta or
        /// roll/pitch. Run logs from `simulate` work directly.
        #[arg(long)]
        log: PathBuf,
    },
    /// Check the QP solver against brute-force enumeration on random
    /// box-constrained problems, printing one line per case.
    QpSelftest {
        /// Number of random problems.
        #[arg(long, default_value_t = 100)]
        cases: usize,
        /// RNG seed for problem generation.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Re-run every bundled scenario and check metrics against the stored
    /// expectations.
    VerifyBundle {
        /// Bundle directory holding *.toml scenarios and expected/.
        #[arg(long, default_value = "scenarios")]
        dir: PathBuf,
        /// Regenerate the expectation files from current behavior instead
        /// of checking. The only sanctioned way to update them.
        #[arg(long)]
        bless: bool,
    },
    /// Print the version.
    Version,
}

/// Failure classification drives the exit code.
enum CliError {
    /// Unusable input; exit 2.
    Config(String),
    /// Valid configuration ran and failed; exit 1.
    Fault(String),
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Fault(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Simulate {
            scenario,
            controller,
            out,
            seed,
        } => cmd_simulate(&scenario, controller.as_deref(), &out, seed),
        Command::Compare {
            scenario,
            controllers,
            out,
            seed,
        } => cmd_compare(&scenario, &controllers, &out, seed),
        Command::Sysid { log } => cmd_sysid(&log),
        Command::QpSelftest { cases, seed } => cmd_qp_selftest(cases, seed),
        Command::VerifyBundle { dir, bless } => cmd_verify_bundle(&dir, bless),
        Command::Version => {
            println!("aerograsp {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario, CliError> {
    let mut scenario = Scenario::load(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    Ok(scenario)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Fault(format!("{}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn cmd_simulate(
    scenario_path: &Path,
    controller: Option<&str>,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let scenario = load_scenario(scenario_path, seed)?;
    let controller = match controller {
        Some(name) => ControllerKind::parse(name).map_err(|e| CliError::Config(e.to_string()))?,
        None => scenario.default_controller,
    };
    ensure_dir(out)?;

    let output =
        run(&scenario, controller).map_err(|e| CliError::Config(e.to_string()))?;

    let stem = format!("{}-{}", scenario.name, controller.as_str());
    let csv_path = out.join(format!("{stem}.csv"));
    write_file(&csv_path, &csv_string(&output.rows, scenario.log_timing))?;

    println!("scenario:   {} ({} rows)", scenario.name, output.rows.len());
    println!("controller: {}", controller.as_str());
    println!("seed:       {}", output.seed);
    println!("log:        {}", csv_path.display());
    if let Some(metrics) = &output.metrics {
        let metrics_path = out.join(format!("{stem}-metrics.toml"));
        write_file(&metrics_path, &metrics.to_toml())?;
        println!("metrics:    {}", metrics_path.display());
        for (name, value) in metrics.named_values() {
            println!("  {name:<22} {value:>12.4}");
        }
    }
    match &output.fault {
        Some(f) => Err(CliError::Fault(format!("run aborted: {f}"))),
        None => Ok(()),
    }
}

fn cmd_compare(
    scenario_path: &Path,
    controllers: &[String],
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let scenario = load_scenario(scenario_path, seed)?;
    if controllers.is_empty() {
        return Err(CliError::Config("controller list is empty".into()));
    }
    let kinds = controllers
        .iter()
        .map(|name| ControllerKind::parse(name))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Config(e.to_string()))?;
    ensure_dir(out)?;

    let report = compare(&scenario, &kinds).map_err(|e| CliError::Config(e.to_string()))?;

    for run_out in &report.runs {
        let stem = format!("{}-{}", scenario.name, run_out.controller.as_str());
        write_file(
            &out.join(format!("{stem}.csv")),
            &csv_string(&run_out.rows, scenario.log_timing),
        )?;
        write_file(
            &out.join(format!("{stem}-err.csv")),
            &CompareReport::error_series_csv(run_out),
        )?;
    }
    write_file(&out.join("compare.txt"), &report.table_text())?;
    write_file(&out.join("compare.csv"), &report.table_csv())?;

    print!("{}", report.table_text());
    println!("artifacts in {}", out.display());

    let faulted: Vec<String> = report
        .runs
        .iter()
        .filter_map(|r| {
            r.fault
                .as_ref()
                .map(|f| format!("{}: {f}", r.controller.as_str()))
        })
        .collect();
    if faulted.is_empty() {
        Ok(())
    } else {
        Err(CliError::Fault(faulted.join("; ")))
    }
}

/// Pull (t, phi_cmd, phi, theta_cmd, theta) columns out of a CSV by header
/// name. Accepts the run-log header (roll/pitch) or a minimal sysid log
/// (phi/theta).
fn parse_attitude_log(text: &str) -> Result<Vec<SysIdSample>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty log")?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |names: &[&str]| {
        names
            .iter()
            .find_map(|n| columns.iter().position(|c| c == n))
            .ok_or_else(|| format!("log is missing a {} column", names.join("/")))
    };
    let c_t = find(&["t"])?;
    let c_phi_cmd = find(&["phi_cmd"])?;
    let c_theta_cmd = find(&["theta_cmd"])?;
    let c_phi = find(&["phi", "roll"])?;
    let c_theta = find(&["theta", "pitch"])?;

    let mut samples = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let get = |col: usize| -> Result<f64, String> {
            fields
                .get(col)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| format!("line {}: bad value in column {col}", idx + 2))
        };
        samples.push(SysIdSample {
            t: get(c_t)?,
            phi_cmd: get(c_phi_cmd)?,
            phi: get(c_phi)?,
            theta_cmd: get(c_theta_cmd)?,
            theta: get(c_theta)?,
        });
    }
    Ok(samples)
}

fn cmd_sysid(log: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(log)
        .map_err(|e| CliError::Config(format!("{}: {e}", log.display())))?;
    let samples = parse_attitude_log(&text).map_err(CliError::Config)?;
    let dt = if samples.len() >= 2 {
        samples[1].t - samples[0].t
    } else {
        0.0
    };
    let fit = identify_time_constants(&samples).map_err(|e| match e {
        NmpcError::InsufficientExcitation { .. } => CliError::Fault(e.to_string()),
        other => CliError::Config(other.to_string()),
    })?;
    println!("samples:   {} (dt = {dt:.4} s)", samples.len());
    println!(
        "tau_phi:   {:.4} s  (rms residual {:.2e} rad)",
        fit.tau_phi, fit.residual_phi
    );
    println!(
        "tau_theta: {:.4} s  (rms residual {:.2e} rad)",
        fit.tau_theta, fit.residual_theta
    );
    Ok(())
}

/// Same distribution as the solver's randomized tests: PD Hessian with a
/// 0.1 eigenvalue floor, bounds straddling zero.
fn random_box_qp(rng: &mut ChaCha12Rng, n: usize) -> QpProblem {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let mut h = &m * m.transpose();
    for i in 0..n {
        h[(i, i)] += 0.1;
    }
    let h = 0.5 * (&h + h.transpose());
    let f = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
    let lb = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..0.0));
    let ub = DVector::from_fn(n, |_, _| rng.gen_range(0.1..2.0));
    QpProblem::new_box(h, f, lb, ub).expect("generated problem is valid")
}

const SELFTEST_TOL: f64 = 1e-7;

fn cmd_qp_selftest(cases: usize, seed: u64) -> Result<(), CliError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    for case in 0..cases {
        let problem = random_box_qp(&mut rng, 6);
        let sol = solve(&problem, None);
        let reference = reference_solve_box(&problem).expect("box problem within oracle scope");
        let diff = (&sol.x - &reference).abs().max();
        let ok = sol.status == QpStatus::Optimal && sol.kkt_residual < KKT_TOL && diff < SELFTEST_TOL;
        if ok {
            println!(
                "case {case:04}: pass  (iters {:2}, kkt {:.1e}, vs oracle {:.1e})",
                sol.iterations, sol.kkt_residual, diff
            );
        } else {
            failures += 1;
            println!(
                "case {case:04}: FAIL  (status {:?}, kkt {:.1e}, vs oracle {:.1e})",
                sol.status, sol.kkt_residual, diff
            );
        }
    }
    println!("{} of {cases} cases passed", cases - failures);
    if failures == 0 {
        Ok(())
    } else {
        Err(CliError::Fault(format!("{failures} self-test case(s) failed")))
    }
}

fn cmd_verify_bundle(dir: &Path, do_bless: bool) -> Result<(), CliError> {
    if do_bless {
        let written = bless(dir).map_err(|e| CliError::Config(e.to_string()))?;
        for path in &written {
            println!("blessed {}", path.display());
        }
        println!("{} expectation file(s) written", written.len());
        Ok(())
    } else {
        let report = verify_bundle(dir).map_err(|e| CliError::Config(e.to_string()))?;
        print!("{}", report.text());
        if report.passed() {
            Ok(())
        } else {
            Err(CliError::Fault("bundle verification failed".into()))
        }
    }
}
