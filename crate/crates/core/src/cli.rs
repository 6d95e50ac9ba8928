//! Command-line front end.
//!
//! Exit codes: 0 success, 1 solver non-convergence (or a failed self-test
//! suite), 2 configuration or usage error.
//!
//! Output files:
//!
//! - `openloop`: `openloop_<controller>.json` (scenario tree, `"schema": 1`)
//!   and `openloop_<controller>_nominal.csv`
//!   (`scenario,step,time,r_x,r_y,r_theta,r_v,r_omega,h_x,h_y,u_r_a,u_r_alpha`).
//! - `closedloop`: `closedloop_<controller>_seed<N>.csv`
//!   (`time,r_x,r_y,r_theta,r_v,r_omega,h_x,h_y,u_r_a,u_r_alpha,min_distance,status`)
//!   and `closedloop_<controller>_seed<N>.json` with every solve's tree.
//! - `batch`: `batch_summary.csv` (`controller,mean_cost,violations,mean_solve_time_s`),
//!   or `batch_summary.json` with the per-run records.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::corridor::{
    batch_experiment, closed_loop_run_with, open_loop, write_nominal_csv, write_trajectory_csv, CaseParams, Controller,
};
use crate::error::{Error, Result};
use crate::nlp::SolveStatus;
use crate::selftest::{run_selftest, SelftestOptions, SUITES};

/// Environment variable overriding the output directory when `--out` is absent.
pub const OUT_DIR_ENV: &str = "ELLMPC_OUT_DIR";

const AFTER_HELP: &str = "\
Exit codes: 0 success, 1 solver non-convergence or failed self-test, 2 config/usage error.

CSV columns:
  openloop   scenario,step,time,r_x,r_y,r_theta,r_v,r_omega,h_x,h_y,u_r_a,u_r_alpha
  closedloop time,r_x,r_y,r_theta,r_v,r_omega,h_x,h_y,u_r_a,u_r_alpha,min_distance,status
  batch      controller,mean_cost,violations,mean_solve_time_s

All JSON outputs carry a top-level \"schema\": 1 field.
The output directory defaults to $ELLMPC_OUT_DIR, then the working directory.";

#[derive(Parser, Debug)]
#[command(name = "ellmpc", version, about = "Ellipsoidal tube and multi-stage MPC, corridor case study", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the geometry, propagation, derivative and solver suites.
    Selftest {
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        verbose: bool,
        /// Corrupt one suite on purpose (checks failure reporting).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Solve one OCP at the initial state and export the prediction.
    Openloop(Common),
    /// Simulate one closed-loop run.
    Closedloop(Common),
    /// Run all (or the selected) controllers over `n_runs` seeds.
    Batch(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON case configuration; unspecified keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Disturbance seed (closedloop) or base seed (batch).
    #[arg(long)]
    pub seed: Option<u64>,
    /// single_tube_K0, single_tube_Kopt, multistage_K0 or multistage_Kopt.
    #[arg(long)]
    pub controller: Option<String>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[arg(long)]
    pub verbose: bool,
    /// Write zero wall times so repeated runs give identical files.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Process exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success = 0,
    NotConverged = 1,
    ConfigError = 2,
}

pub fn run(cli: Cli) -> Outcome {
    let result = match cli.command {
        Command::Selftest { format, verbose, inject_fault } => selftest(format, verbose, inject_fault),
        Command::Openloop(c) => openloop(&c),
        Command::Closedloop(c) => closedloop(&c),
        Command::Batch(c) => batch(&c),
    };
    match result {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Json(_) | Error::Io(_) | Error::InvalidSpec(_) => Outcome::ConfigError,
                _ => Outcome::NotConverged,
            }
        }
    }
}

fn load(c: &Common) -> Result<CaseParams> {
    let mut p = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            CaseParams::from_json(&text)?
        }
        None => CaseParams::default(),
    };
    if let Some(name) = &c.controller {
        p.controller = Controller::parse(name)?;
    }
    if let Some(seed) = c.seed {
        p.base_seed = seed;
    }
    p.solver.verbose |= c.verbose;
    p.gain_solver.verbose |= c.verbose;
    p.validate()?;
    Ok(p)
}

fn out_dir(c: &Common) -> Result<PathBuf> {
    let dir = c
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(dir.join(name))
}

fn selftest(format: Format, verbose: bool, inject_fault: Option<String>) -> Result<Outcome> {
    if let Some(s) = &inject_fault {
        if !SUITES.contains(&s.as_str()) {
            return Err(Error::Config(format!("unknown suite '{s}'")));
        }
    }
    let reports = run_selftest(&SelftestOptions { inject_fault });
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&serde_json::json!({"schema": 1, "suites": reports}))?),
        Format::Csv => {
            for r in &reports {
                println!(
                    "{:<12} {}  checks={} failures={} max_error={:.3e} tol={:.1e}",
                    r.suite,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.checks,
                    r.failures,
                    r.max_error,
                    r.tolerance
                );
            }
        }
    }
    if verbose {
        eprintln!("{} suites run", reports.len());
    }
    Ok(if reports.iter().all(|r| r.passed) { Outcome::Success } else { Outcome::NotConverged })
}

fn openloop(c: &Common) -> Result<Outcome> {
    let p = load(c)?;
    let dir = out_dir(c)?;
    let solve = open_loop(&p)?;
    let name = p.controller.name();
    let mut record = solve.solution.to_record()?;
    if c.no_timing {
        if let Some(d) = &mut record.diagnostics {
            d.wall_time = 0.0;
        }
    }
    let json = write_json(&dir, &format!("openloop_{name}.json"), &record)?;
    write_nominal_csv(&solve.solution, p.dt, create(&dir, &format!("openloop_{name}_nominal.csv"))?)?;
    let r = &solve.result;
    eprintln!(
        "{name}: status={:?} objective={:.6} max_violation={:.3e} stationarity={:.3e} -> {}",
        r.status,
        r.objective,
        r.max_violation,
        r.kkt_stationarity,
        json.display()
    );
    Ok(if r.status == SolveStatus::Converged { Outcome::Success } else { Outcome::NotConverged })
}

fn closedloop(c: &Common) -> Result<Outcome> {
    let p = load(c)?;
    let dir = out_dir(c)?;
    let seed = p.base_seed;
    let mut run = closed_loop_run_with(&p, seed, true)?;
    if c.no_timing {
        run = run.without_timing();
    }
    let stem = format!("closedloop_{}_seed{seed}", p.controller.name());
    write_trajectory_csv(&run, p.dt, create(&dir, &format!("{stem}.csv"))?)?;
    #[derive(Serialize)]
    struct Doc<'a> {
        schema: u32,
        run: &'a crate::corridor::RunRecord,
    }
    write_json(&dir, &format!("{stem}.json"), &Doc { schema: 1, run: &run })?;
    eprintln!(
        "{}: cost={:.6} violations={} fallbacks={} mean_solve_time={:.3}s",
        p.controller.name(),
        run.closed_loop_cost,
        run.violations,
        run.fallbacks,
        run.mean_solve_time_s
    );
    Ok(if run.fallbacks == 0 { Outcome::Success } else { Outcome::NotConverged })
}

fn batch(c: &Common) -> Result<Outcome> {
    let p = load(c)?;
    let dir = out_dir(c)?;
    let controllers: Vec<Controller> = match &c.controller {
        Some(_) => vec![p.controller],
        None => Controller::ALL.to_vec(),
    };
    let mut summary = batch_experiment(&p, &controllers, p.n_runs, p.base_seed)?;
    if c.no_timing {
        summary = summary.without_timing();
    }
    match c.format {
        Format::Csv => summary.write_csv(create(&dir, "batch_summary.csv")?)?,
        Format::Json => {
            write_json(&dir, "batch_summary.json", &summary)?;
        }
    }
    for r in &summary.rows {
        eprintln!(
            "{:<18} mean_cost={:.4} violations={} fallbacks={} mean_solve_time={:.3}s",
            r.controller.name(),
            r.mean_cost,
            r.violations,
            r.fallbacks,
            r.mean_solve_time_s
        );
    }
    Ok(Outcome::Success)
}
