//! Command line front end: run controllers over scenarios or grids and
//! write the result artifacts, or validate a network description.
//!
//! Every run emits four files into the output directory: `metrics.csv` and
//! `metrics.json` with one row per (scenario, controller), `comparison.csv`
//! with each chance-constrained run against the deterministic baseline of
//! its scenario, `traces.csv` with the full per-sample trajectories, and a
//! `manifest.json` listing the inputs and the content hash of every file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::controller::ControllerConfig;
use crate::error::Error;
use crate::network::{
    astlingen, check_astlingen, load_network_file, ElementKind, NetworkModel, ASTLINGEN_CONFIG,
};
use crate::qp::SolverSettings;
use crate::simulator::{
    compare_runs, grid_csv, grid_json, run_grid, ControllerKind, GridRun, GridSpec, RainScenario,
};
use crate::stochastics::RainUncertainty;

#[derive(Parser)]
#[command(
    name = "sewer-mpc",
    version,
    about = "Deterministic and chance-constrained MPC over sewer networks with weir overflows"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run controllers over a scenario or a grid and write artifacts.
    Run(RunArgs),
    /// Load a network description and report on it.
    Validate(ValidateArgs),
}

#[derive(Args)]
#[command(group = ArgGroup::new("workload").required(true).args(["grid", "scenario"]))]
struct RunArgs {
    /// Network description path; the bundled six tank benchmark if omitted.
    #[arg(long)]
    network: Option<PathBuf>,
    /// Scenario grid name; `default` is the 120 scenario benchmark grid.
    #[arg(long)]
    grid: Option<String>,
    /// Single scenario as INTENSITY:DURATION in um/s and minutes, e.g. 3.5:210.
    #[arg(long)]
    scenario: Option<String>,
    /// Comma separated controllers: det, cc:ALPHA or cc:ALPHA:GAMMA.
    #[arg(long, default_value = "det,cc:0.9,cc:0.8,cc:0.7")]
    controllers: String,
    /// Seed for the rain realizations.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Perturb the realized rain with the truncated Gaussian disturbance
    /// model instead of replaying the forecast mean.
    #[arg(long)]
    plant_noise: bool,
    /// Output directory for artifacts.
    #[arg(long, env = "SEWER_MPC_OUT", default_value = "out")]
    out: PathBuf,
    /// Prediction horizon in steps.
    #[arg(long)]
    horizon: Option<usize>,
    /// Sample time override in minutes.
    #[arg(long)]
    dt: Option<f64>,
    /// Solver tolerance override.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Solver iteration limit override.
    #[arg(long)]
    max_iterations: Option<usize>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Network description path; the bundled six tank benchmark if omitted.
    #[arg(long)]
    network: Option<PathBuf>,
    /// Also require the exact benchmark topology (element kinds, controls
    /// and routing; parameters stay free).
    #[arg(long)]
    check_astlingen: bool,
}

/// Entry point behind the thin binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Validate(args) => cmd_validate(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_model(path: &Option<PathBuf>, dt: Option<f64>) -> Result<(NetworkModel, String), Error> {
    let (model, text) = match path {
        Some(p) => (load_network_file(p)?, std::fs::read_to_string(p)?),
        None => (astlingen(), ASTLINGEN_CONFIG.to_string()),
    };
    match dt {
        Some(dt) => Ok((model.with_dt(dt)?, text)),
        None => Ok((model, text)),
    }
}

/// Parses `INTENSITY:DURATION` into a scenario with the grid's dry margins.
fn parse_scenario(text: &str, spec: &GridSpec) -> Result<RainScenario, Error> {
    let (i, d) = text.split_once(':').ok_or_else(|| {
        Error::Usage(format!(
            "scenario '{text}' must be INTENSITY:DURATION, e.g. 3.5:210"
        ))
    })?;
    let parse = |part: &str, what: &str| -> Result<f64, Error> {
        part.parse::<f64>()
            .map_err(|_| Error::Usage(format!("scenario {what} '{part}' is not a number")))
    };
    RainScenario::new(
        parse(i, "intensity")?,
        parse(d, "duration")?,
        spec.lead_steps,
        spec.tail_steps,
    )
}

fn parse_controllers(text: &str) -> Result<Vec<ControllerKind>, Error> {
    let mut kinds = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        kinds.push(part.parse::<ControllerKind>()?);
    }
    if kinds.is_empty() {
        return Err(Error::Usage("no controllers selected".into()));
    }
    Ok(kinds)
}

fn sha256_hex(data: &str) -> String {
    hex::encode(Sha256::digest(data.as_bytes()))
}

fn write_artifact(
    dir: &Path,
    name: &str,
    content: &str,
    hashes: &mut Vec<(String, String)>,
) -> Result<(), Error> {
    std::fs::write(dir.join(name), content)?;
    hashes.push((name.to_string(), sha256_hex(content)));
    Ok(())
}

fn comparison_csv(runs: &[GridRun]) -> String {
    let mut out = String::from(
        "scenario,controller,overflow_diff_m3,overflow_pct,wwtp_diff_m3,wwtp_pct,\
         cost_diff,cost_pct,time_diff_s\n",
    );
    for candidate in runs {
        if candidate.controller == ControllerKind::Deterministic {
            continue;
        }
        let Some(baseline) = runs.iter().find(|r| {
            r.controller == ControllerKind::Deterministic && r.scenario == candidate.scenario
        }) else {
            continue;
        };
        let cmp = compare_runs(&baseline.metrics, &candidate.metrics);
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            candidate.scenario.name(),
            candidate.controller.label(),
            cmp.overflow_diff_m3,
            cmp.overflow_pct,
            cmp.wwtp_diff_m3,
            cmp.wwtp_pct,
            cmp.cost_diff,
            cmp.cost_pct,
            cmp.time_diff_s,
        )
        .unwrap();
    }
    out
}

fn traces_csv(model: &NetworkModel, runs: &[GridRun]) -> String {
    let tank_ids: Vec<&str> = model
        .tanks()
        .iter()
        .map(|&e| model.elements()[e].id.as_str())
        .collect();
    let control_ids = model.control_ids();
    let weirs = model.weir_elements();

    let mut out = String::from("scenario,controller,k,time_min,rain_total");
    for id in &tank_ids {
        write!(out, ",vol_{id}").unwrap();
    }
    for id in control_ids {
        write!(out, ",cmd_{id}").unwrap();
    }
    for id in control_ids {
        write!(out, ",app_{id}").unwrap();
    }
    for &e in &weirs {
        write!(out, ",ovf_{}", model.elements()[e].id).unwrap();
    }
    out.push_str(",objective,solve_time_s,iterations\n");

    for run in runs {
        let scenario = run.scenario.name();
        let controller = run.controller.label();
        for (k, step) in run.trace.steps.iter().enumerate() {
            write!(
                out,
                "{scenario},{controller},{k},{},{}",
                k as f64 * model.dt(),
                step.rain.sum()
            )
            .unwrap();
            for t in 0..model.n_tanks() {
                write!(out, ",{}", step.state_after.volumes[t]).unwrap();
            }
            for t in 0..model.n_tanks() {
                write!(out, ",{}", step.commanded[t]).unwrap();
            }
            for t in 0..model.n_tanks() {
                write!(out, ",{}", step.flows.control[t]).unwrap();
            }
            for &e in &weirs {
                write!(out, ",{}", step.flows.overflow[e]).unwrap();
            }
            writeln!(
                out,
                ",{},{},{}",
                step.objective, step.solve_time_s, step.iterations
            )
            .unwrap();
        }
    }
    out
}

fn cmd_run(args: &RunArgs) -> Result<i32, Error> {
    let (model, network_text) = load_model(&args.network, args.dt)?;
    let controllers = parse_controllers(&args.controllers)?;

    let mut config = if args.network.is_none() {
        ControllerConfig::benchmark()
    } else {
        ControllerConfig::uniform(&model, 20, 5000.0)
    };
    if let Some(h) = args.horizon {
        config.horizon = h;
    }
    // Closed-loop metrics are percent-level; the active-set cleanup pass
    // costs several times the interior-point loop on these problem sizes
    // and buys nothing at that resolution.
    let mut settings = SolverSettings {
        polish: false,
        ..SolverSettings::default()
    };
    if let Some(tol) = args.tolerance {
        settings.tolerance = tol;
    }
    if let Some(iters) = args.max_iterations {
        settings.max_iterations = iters;
    }

    let grid_spec = GridSpec::benchmark();
    let scenarios = match (&args.grid, &args.scenario) {
        (Some(name), None) if name == "default" => grid_spec.scenarios()?,
        (Some(name), None) => {
            return Err(Error::Usage(format!(
                "unknown grid '{name}', the only named grid is 'default'"
            )));
        }
        (None, Some(text)) => vec![parse_scenario(text, &grid_spec)?],
        _ => unreachable!("clap enforces exactly one of --grid/--scenario"),
    };

    let uncertainty = RainUncertainty::default();
    eprintln!(
        "running {} scenario(s) x {} controller(s) on {} ...",
        scenarios.len(),
        controllers.len(),
        args.network
            .as_deref()
            .map_or("bundled benchmark network".into(), |p| p.display().to_string()),
    );
    let runs = run_grid(
        &model,
        &scenarios,
        &controllers,
        &config,
        &uncertainty,
        &settings,
        args.seed,
        args.plant_noise,
    )?;

    std::fs::create_dir_all(&args.out)?;
    let mut hashes: Vec<(String, String)> = Vec::new();
    write_artifact(&args.out, "metrics.csv", &grid_csv(&runs), &mut hashes)?;
    let mut metrics_doc = grid_json(&model, &runs);
    metrics_doc["config"] = serde_json::json!({
        "seed": args.seed,
        "plant_noise": args.plant_noise,
        "horizon": config.horizon,
        "dt_min": model.dt(),
        "controllers": controllers.iter().map(|c| c.label()).collect::<Vec<_>>(),
        "tolerance": settings.tolerance,
        "max_iterations": settings.max_iterations,
    });
    write_artifact(
        &args.out,
        "metrics.json",
        &serde_json::to_string_pretty(&metrics_doc)?,
        &mut hashes,
    )?;
    write_artifact(&args.out, "comparison.csv", &comparison_csv(&runs), &mut hashes)?;
    write_artifact(&args.out, "traces.csv", &traces_csv(&model, &runs), &mut hashes)?;

    let manifest = serde_json::json!({
        "tool": { "name": "sewer-mpc", "version": env!("CARGO_PKG_VERSION") },
        "network": {
            "source": args.network.as_deref().map_or("bundled".into(), |p| p.display().to_string()),
            "sha256": sha256_hex(&network_text),
        },
        "seed": args.seed,
        "plant_noise": args.plant_noise,
        "controllers": controllers.iter().map(|c| c.label()).collect::<Vec<_>>(),
        "scenarios": scenarios.iter().map(|s| s.name()).collect::<Vec<_>>(),
        "artifacts": hashes
            .iter()
            .map(|(name, hash)| serde_json::json!({ "file": name, "sha256": hash }))
            .collect::<Vec<_>>(),
    });
    std::fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    let failed: Vec<&GridRun> = runs.iter().filter(|r| r.metrics.failed).collect();
    for run in &runs {
        println!(
            "{:>12} {:>8}: overflow {:>12.1} m3, wwtp {:>11.1} m3, cost {:>13.1}, max solve {:.3} s{}",
            run.scenario.name(),
            run.controller.label(),
            run.metrics.overflow_total_m3,
            run.metrics.wwtp_m3,
            run.metrics.cost,
            run.metrics.max_solve_s,
            if run.metrics.failed { "  FAILED" } else { "" },
        );
    }
    println!("artifacts written to {}", args.out.display());
    if failed.is_empty() {
        Ok(0)
    } else {
        for run in &failed {
            eprintln!(
                "solver failure in {} / {}: {}",
                run.scenario.name(),
                run.controller.label(),
                run.metrics.failure.as_deref().unwrap_or("unknown"),
            );
        }
        Ok(3)
    }
}

fn cmd_validate(args: &ValidateArgs) -> Result<i32, Error> {
    let (model, _) = load_model(&args.network, None)?;
    println!(
        "network ok: {} tanks, {} weir pipes, {} delay chains ({} registers), {} catchments",
        model.n_tanks(),
        model.n_pipes(),
        model.n_delays(),
        model.n_registers(),
        model.n_catchments(),
    );
    println!(
        "dt {} min, treatment control {}",
        model.dt(),
        model.control_ids()[model.wwtp_control()],
    );
    for &e in model.tanks() {
        if let ElementKind::Tank {
            capacity_m3,
            beta,
            control_cap,
        } = model.elements()[e].kind
        {
            println!(
                "  tank {:>4}: capacity {:>7} m3, beta {}, control cap {} m3/min",
                model.elements()[e].id,
                capacity_m3,
                beta,
                control_cap,
            );
        }
    }
    for &e in model.pipes() {
        if let ElementKind::WeirPipe { capacity } = model.elements()[e].kind {
            println!(
                "  pipe {:>4}: capacity {} m3/min",
                model.elements()[e].id, capacity
            );
        }
    }
    if args.check_astlingen {
        check_astlingen(&model)?;
        println!("benchmark topology check passed");
    }
    Ok(0)
}
