mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tumor_ocp::continuation::seed;
use tumor_ocp::forward::{constraint_trace, ConstraintTrace};
use tumor_ocp::model::{apply_continuation, check_cfl};
use tumor_ocp::pmp::{
    optimize_switching_times, solve_adjoint, solve_ocp0_rollout, switching_diagnostics, SimplifiedProblem,
    StructureReport, SwitchingResult,
};
use tumor_ocp::{
    rollout, run_schedule, solve_ocp, ControlSchedule, Error, ModelParameters, PhenotypeGrid, RunRecord,
    StateTrajectory, TimeGrid,
};

use crate::config::{LoadedConfig, Resolved};
use crate::output::{OutputDir, RunManifest, Table};

#[derive(Parser, Debug)]
#[command(name = "tumor-ocp", version)]
#[command(about = "Optimal dosing for a nonlocal healthy/cancer cell population model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file; built-in defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Set a configuration value by dot path, e.g. grid.nt=250
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate the configuration and the CFL condition
    Check(Common),
    /// Integrate the model under given doses
    Simulate(Common),
    /// Optimize the two switching times of the simplified problem
    #[command(name = "solve-ocp0")]
    SolveOcp0(Common),
    /// Solve one intermediate problem at the configured lambda
    Solve(Common),
    /// Run the switching-time seed and a continuation schedule
    Continue(Common),
}

/// The bang-bang optimum failed its structure check.
#[derive(Debug)]
struct StructureViolation(StructureReport);

impl std::fmt::Display for StructureViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "switching-function structure violated: {:?}", self.0)
    }
}

impl std::error::Error for StructureViolation {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<StructureViolation>().is_some() {
        return 3;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Cfl { .. }) => 2,
        Some(Error::ContinuationAborted { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    let (name, common) = match &command {
        Command::Check(c) => ("check", c),
        Command::Simulate(c) => ("simulate", c),
        Command::SolveOcp0(c) => ("solve-ocp0", c),
        Command::Solve(c) => ("solve", c),
        Command::Continue(c) => ("continue", c),
    };
    let loaded = config::load(common.config.as_deref(), &common.overrides)?;
    let resolved = loaded.resolve()?;
    if let Command::Check(_) = command {
        return check(&loaded, &resolved);
    }
    let mut out = OutputDir::create(&common.out)?;
    let mut manifest = RunManifest::start(name, &loaded.hash);
    let result = match command {
        Command::Simulate(_) => simulate(&resolved, &mut out),
        Command::SolveOcp0(_) => solve_ocp0(&resolved, &mut out),
        Command::Solve(_) => solve(&resolved, &mut out),
        Command::Continue(_) => continue_schedule(&resolved, &mut out),
        Command::Check(_) => unreachable!(),
    };
    manifest.exit_code = result.as_ref().err().map_or(0, |e| exit_code(e) as i32);
    // Failed runs still get a manifest for whatever they wrote.
    out.finish(manifest)?;
    result
}

#[derive(Serialize)]
struct CheckSummary {
    config_hash: String,
    case: tumor_ocp::TestCase,
    nx: usize,
    nt: usize,
    horizon: f64,
    cfl_number: f64,
    cfl_passed: bool,
    lambda0: f64,
}

fn check(loaded: &LoadedConfig, r: &Resolved) -> Result<()> {
    let cfl = check_cfl(&r.params, &r.grid, &r.time);
    let summary = CheckSummary {
        config_hash: loaded.hash.clone(),
        case: r.case,
        nx: r.grid.num_cells(),
        nt: r.time.num_steps(),
        horizon: r.time.horizon(),
        cfl_number: cfl.number,
        cfl_passed: cfl.passed,
        lambda0: r.params.lambda0,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    r.schedule()?;
    cfl.into_result()?;
    Ok(())
}

fn controls_table(u: &ControlSchedule, time: &TimeGrid) -> Table {
    let mut t = Table::new("controls", &["t", "u1", "u2"]);
    for i in 0..u.len() {
        t.row(&[time.time(i), u.u1[i], u.u2[i]]);
    }
    t
}

fn trajectory_table(traj: &StateTrajectory, trace: &ConstraintTrace, time: &TimeGrid) -> Table {
    let mut t = Table::new("trajectory", &["t", "rho_H", "rho_C", "I_H", "I_C", "c_HC", "c_H"]);
    for i in 0..=traj.num_steps() {
        t.row(&[
            time.time(i),
            traj.rho_h[i],
            traj.rho_c[i],
            traj.i_h[i],
            traj.i_c[i],
            trace.c_hc[i],
            trace.c_h[i],
        ]);
    }
    t
}

/// Densities at `count` evenly spaced time nodes, one row per phenotype node.
fn density_table(traj: &StateTrajectory, grid: &PhenotypeGrid, time: &TimeGrid, count: usize) -> Table {
    let mut t = Table::new("densities", &["t", "x", "n_H", "n_C"]);
    let nt = traj.num_steps();
    let mut nodes: Vec<usize> = match count {
        0 => Vec::new(),
        1 => vec![nt],
        k => (0..k).map(|s| (s * nt + (k - 1) / 2) / (k - 1)).collect(),
    };
    nodes.dedup();
    let xs = grid.nodes();
    for i in nodes {
        for (j, x) in xs.iter().enumerate() {
            t.row(&[time.time(i), *x, traj.n_h[[i, j]], traj.n_c[[i, j]]]);
        }
    }
    t
}

fn write_state(
    out: &mut OutputDir,
    r: &Resolved,
    params: &ModelParameters,
    u: &ControlSchedule,
    traj: &StateTrajectory,
) -> Result<()> {
    let trace = constraint_trace(traj, params);
    out.table("controls.csv", controls_table(u, &r.time))?;
    out.table("trajectory.csv", trajectory_table(traj, &trace, &r.time))?;
    out.table("densities.csv", density_table(traj, &r.grid, &r.time, r.snapshots))
}

fn simulate(r: &Resolved, out: &mut OutputDir) -> Result<()> {
    let nt = r.time.num_steps();
    let u = r.controls.clone().unwrap_or_else(|| ControlSchedule::zeros(nt));
    u.check(nt, r.params.u1_max, r.params.u2_max)?;
    let traj = rollout(&r.initial, &u, &r.params, &r.grid, &r.time)?;
    write_state(out, r, &r.params, &u, &traj)?;
    println!(
        "rho_C: {:.6e} -> {:.6e}; rho_H: {:.6e} -> {:.6e}",
        traj.rho_c[0],
        traj.final_rho_c(),
        traj.rho_h[0],
        traj.rho_h[nt]
    );
    Ok(())
}

#[derive(Serialize)]
struct SwitchingOutput<'a> {
    result: &'a SwitchingResult,
    structure: &'a StructureReport,
    structure_passed: bool,
}

fn solve_ocp0(r: &Resolved, out: &mut OutputDir) -> Result<()> {
    let p = SimplifiedProblem::new(&r.params, r.grid, r.time, &r.initial);
    let res = optimize_switching_times(&p, &r.switching)?;
    let u = p.controls(&res.times);
    let (_, traj) = solve_ocp0_rollout(&res.times, &p)?;
    let adj = solve_adjoint(&traj, &u, &p, -1.0)?;
    let diag = switching_diagnostics(&traj, &adj, &p);

    let mut t = Table::new("switching-functions", &["t", "phi1", "phi2", "psi1"]);
    for i in 0..=r.time.num_steps() {
        t.row(&[r.time.time(i), diag.phi1[i], diag.phi2[i], diag.psi1[i]]);
    }
    out.table("switching_functions.csv", t)?;
    write_state(out, r, &p.params, &u, &traj)?;
    let passed = diag.report.passed();
    out.json(
        "switching.json",
        &SwitchingOutput {
            result: &res,
            structure: &diag.report,
            structure_passed: passed,
        },
    )?;
    println!("t1 = {:.6}, t2 = {:.6}, cost = {:.10e}", res.times.t1, res.times.t2, res.cost);
    println!("structure report: {}", if passed { "pass" } else { "FAIL" });
    if !passed {
        return Err(StructureViolation(diag.report).into());
    }
    Ok(())
}

fn solve(r: &Resolved, out: &mut OutputDir) -> Result<()> {
    let config = r.continuation();
    let problem = config.problem(&r.lambda, r.params.lambda0);
    check_cfl(&problem.params, &r.grid, &r.time).into_result()?;
    let start = match &r.controls {
        Some(u) => problem.project(u),
        None => seed(&config)?.1,
    };
    let (u, traj, report) = solve_ocp(&problem, &start, &r.solver)?;
    write_state(out, r, &problem.params, &u, &traj)?;
    out.json("solve_report.json", &report)?;
    println!(
        "cost = {:.10e}, violation = {:.2e}, converged = {}",
        report.cost, report.max_violation, report.converged
    );
    Ok(())
}

fn continue_schedule(r: &Resolved, out: &mut OutputDir) -> Result<()> {
    let schedule = r.schedule()?;
    let (target, _) = schedule.final_state();
    check_cfl(&apply_continuation(&r.params, &target), &r.grid, &r.time).into_result()?;
    check_cfl(&r.params, &r.grid, &r.time).into_result()?;
    let config = r.continuation();
    let (record, failure) = match run_schedule(&schedule, &config) {
        Ok(record) => (record, None),
        Err(Error::ContinuationAborted { ramp, record }) => (*record, Some(ramp)),
        Err(e) => return Err(e.into()),
    };
    write_record(out, r, &record)?;
    for s in &record.steps {
        println!(
            "ramp {} bisections {} accepted {} cost {:.6e} violation {:.2e}",
            s.ramp, s.bisections, s.accepted, s.report.cost, s.report.max_violation
        );
    }
    println!("final cost = {:.10e}", record.final_cost);
    if let Some(ramp) = failure {
        bail!(Error::ContinuationAborted {
            ramp,
            record: Box::new(record)
        });
    }
    Ok(())
}

fn write_record(out: &mut OutputDir, r: &Resolved, record: &RunRecord) -> Result<()> {
    out.json("run_record.json", record)?;
    out.table("seed_controls.csv", controls_table(&record.seed_controls, &r.time))?;
    let params = apply_continuation(&r.params, &record.final_lambda);
    match &record.final_trajectory {
        Some(traj) => write_state(out, r, &params, &record.final_controls, traj),
        None => out.table("controls.csv", controls_table(&record.final_controls, &r.time)),
    }
}
