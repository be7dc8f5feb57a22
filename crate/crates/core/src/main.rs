use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use asv_rmpc::io::{plot_script, write_comparison, write_log, write_summary};
use asv_rmpc::planner::{compare_runs, run_closed_loop, ControllerVariant, RunOutcome, TrajectoryLog};
use asv_rmpc::scenario::{load_scenario, ScenarioConfig};
use asv_rmpc::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_ABORTED: u8 = 2;
const EXIT_UNSAFE: u8 = 3;
const EXIT_USAGE: u8 = 64;

/// Lowest h an rmpc-cbf run may log before it counts as a safety violation.
const SAFETY_TOL: f64 = -1e-6;

#[derive(Parser)]
#[command(name = "asv-rmpc", version, about = "Robust MPC with control barrier functions for a surface vessel")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one controller and write its trajectory CSV.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Defaults to the controller named in the scenario.
        #[arg(long)]
        controller: Option<ControllerVariant>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all three controllers and write trajectories plus comparison CSVs.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Load and validate a scenario file, print its config hash.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Data for one of the standard figures on the shipped scenario.
    Figure {
        #[arg(value_parser = ["4", "5", "7", "8"])]
        which: String,
        #[arg(long)]
        out: PathBuf,
        /// Use this scenario instead of the shipped one.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Write a matplotlib script that draws the scenario and trajectory CSVs.
    PlotScript {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Validation(Error),
    Aborted(String),
    Unsafe(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Validation(e)
    }
}

fn scenario_or_shipped(path: Option<&Path>) -> Result<ScenarioConfig, Error> {
    match path {
        Some(p) => load_scenario(p),
        None => ScenarioConfig::shipped(),
    }
}

fn simulate(cfg: &ScenarioConfig, variant: ControllerVariant, out: &Path, file: &str) -> Result<TrajectoryLog, Failure> {
    let log = run_closed_loop(cfg, variant)?;
    let path = out.join(file);
    write_log(&log, &path)?;
    println!(
        "{variant}: {} after {} steps, min h {:.3e}, wrote {}",
        log.outcome.as_str(),
        log.records.len(),
        log.min_h(),
        path.display()
    );
    Ok(log)
}

fn check(logs: &[TrajectoryLog]) -> Result<(), Failure> {
    if let Some(l) = logs.iter().find(|l| l.outcome == RunOutcome::Aborted) {
        return Err(Failure::Aborted(format!("{} run aborted after {} steps", l.variant, l.records.len())));
    }
    if let Some(l) = logs.iter().find(|l| l.variant == ControllerVariant::RmpcCbf && l.min_h() < SAFETY_TOL) {
        return Err(Failure::Unsafe(format!("rmpc-cbf run reached h = {:.3e}", l.min_h())));
    }
    Ok(())
}

fn compare(cfg: &ScenarioConfig, out: &Path, prefix: &str) -> Result<Vec<TrajectoryLog>, Failure> {
    let runs: Vec<Result<TrajectoryLog, Error>> = std::thread::scope(|s| {
        let handles: Vec<_> =
            ControllerVariant::ALL.iter().map(|&v| s.spawn(move || run_closed_loop(cfg, v))).collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    let logs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    for l in &logs {
        let path = out.join(format!("{prefix}{}.csv", l.variant));
        write_log(l, &path)?;
        println!("{}: {} after {} steps, min h {:.3e}", l.variant, l.outcome.as_str(), l.records.len(), l.min_h());
    }
    let rep = compare_runs(&logs)?;
    write_comparison(&rep, &out.join(format!("{prefix}comparison.csv")))?;
    write_summary(&rep, &out.join(format!("{prefix}summary.csv")))?;
    println!("wrote comparison to {}", out.display());
    Ok(logs)
}

fn execute(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Run { scenario, controller, out } => {
            let cfg = load_scenario(&scenario)?;
            let variant = controller.unwrap_or(cfg.controller);
            fs::create_dir_all(&out).map_err(Error::from)?;
            let log = simulate(&cfg, variant, &out, &format!("{variant}.csv"))?;
            check(&[log])
        }
        Cmd::Compare { scenario, out } => {
            let cfg = load_scenario(&scenario)?;
            fs::create_dir_all(&out).map_err(Error::from)?;
            check(&compare(&cfg, &out, "")?)
        }
        Cmd::Validate { scenario } => {
            let cfg = load_scenario(&scenario)?;
            println!(
                "{}: ok ({} obstacles, {} borders, config hash {})",
                cfg.name,
                cfg.obstacles.len(),
                cfg.borders.len(),
                cfg.hash
            );
            Ok(())
        }
        Cmd::Figure { which, out, scenario } => {
            let cfg = scenario_or_shipped(scenario.as_deref())?;
            fs::create_dir_all(&out).map_err(Error::from)?;
            let variant = match which.as_str() {
                "4" => ControllerVariant::MpcNominal,
                "5" => ControllerVariant::RmpcCbf,
                "7" => ControllerVariant::RmpcHardBorder,
                _ => return check(&compare(&cfg, &out, "fig8_")?),
            };
            let log = simulate(&cfg, variant, &out, &format!("fig{which}_{variant}.csv"))?;
            check(&[log])
        }
        Cmd::PlotScript { scenario, out } => {
            let cfg = scenario_or_shipped(scenario.as_deref())?;
            fs::create_dir_all(&out).map_err(Error::from)?;
            let path = out.join("plot.py");
            fs::write(&path, plot_script(&cfg)).map_err(Error::from)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ASV_LOG_LEVEL", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Aborted(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_ABORTED)
        }
        Err(Failure::Unsafe(msg)) => {
            eprintln!("safety violation: {msg}");
            ExitCode::from(EXIT_UNSAFE)
        }
    }
}
