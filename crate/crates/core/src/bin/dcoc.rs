use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dcoc::oracle::OracleMethod;
use dcoc::scenario::{self, Overrides, ScenarioConfig, Table};
use dcoc::DcocError;

#[derive(Parser)]
#[command(name = "dcoc", version, about = "Drift counteraction optimal control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a scenario and write trajectory, plot and record.
    Solve {
        /// Scenario file, or the name of a bundled scenario.
        config: String,
        /// Also run the sweep oracle and compare.
        #[arg(long)]
        cross_check: bool,
        #[command(flatten)]
        flags: Flags,
    },
    /// Compute the maximum time-before-exit independently.
    Oracle {
        config: String,
        #[arg(long, value_enum, default_value_t = Method::Sweep)]
        method: Method,
        #[command(flatten)]
        flags: Flags,
    },
    /// Simulate nominal controls, or the controls of a trajectory table.
    Simulate {
        config: String,
        #[arg(long)]
        controls: Option<PathBuf>,
        #[command(flatten)]
        flags: Flags,
    },
    /// Derivative, momentum, witness and consistency checks.
    Check {
        config: String,
        #[arg(long, default_value_t = 1000)]
        momentum_states: usize,
        #[command(flatten)]
        flags: Flags,
    },
    /// Re-run the scenario behind one of the four figures.
    Reproduce {
        #[arg(value_parser = ["fig1", "fig2", "fig3", "fig4"])]
        figure: String,
        #[command(flatten)]
        flags: Flags,
    },
}

#[derive(Args)]
struct Flags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    big_m: Option<f64>,
    #[arg(long)]
    starts: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            theta: self.theta,
            big_m: self.big_m,
            starts: self.starts,
            out: self.out.clone(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Sweep,
    GridDp,
}

fn load(config: &str, flags: &Flags) -> dcoc::Result<ScenarioConfig> {
    let path = Path::new(config);
    let cfg = if path.exists() {
        ScenarioConfig::load(path)?
    } else {
        scenario::bundled(config)?
    };
    cfg.with_overrides(&flags.overrides())
}

fn print<T: serde::Serialize>(value: &T) -> dcoc::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    // a closed pipe (e.g. `| head`) is not a failure of the run
    let _ = writeln!(std::io::stdout(), "{text}");
    Ok(())
}

/// `Ok(true)` on success, `Ok(false)` on a failed solve or check.
fn run(cli: Cli) -> dcoc::Result<bool> {
    match cli.command {
        Command::Solve {
            config,
            cross_check,
            flags,
        } => {
            let cfg = load(&config, &flags)?;
            let record = scenario::run_scenario(&cfg, &cfg.output_dir(), cross_check)?;
            print(&record)?;
            Ok(record.solved())
        }
        Command::Reproduce { figure, flags } => {
            let mut cfg = scenario::figure_scenario(&figure)?;
            if flags.out.is_none() {
                cfg.output_dir = Some(format!("out/{figure}"));
            }
            let cfg = cfg.with_overrides(&flags.overrides())?;
            let record = scenario::run_scenario(&cfg, &cfg.output_dir(), false)?;
            print(&record)?;
            Ok(record.solved())
        }
        Command::Oracle {
            config,
            method,
            flags,
        } => {
            let cfg = load(&config, &flags)?;
            let method = match method {
                Method::Sweep => OracleMethod::Sweep,
                Method::GridDp => OracleMethod::GridDp,
            };
            let report = scenario::run_oracle(&cfg, method, &cfg.output_dir())?;
            print(&report)?;
            Ok(true)
        }
        Command::Simulate {
            config,
            controls,
            flags,
        } => {
            let cfg = load(&config, &flags)?;
            let controls = match controls {
                Some(path) => {
                    let table = Table::parse(&std::fs::read_to_string(&path)?)?;
                    Some(table.controls(&cfg.control_names())?)
                }
                None => None,
            };
            let record = scenario::run_simulation(&cfg, controls, &cfg.output_dir())?;
            print(&record)?;
            Ok(true)
        }
        Command::Check {
            config,
            momentum_states,
            flags,
        } => {
            let cfg = load(&config, &flags)?;
            let report = scenario::check(&cfg, momentum_states)?;
            print(&report)?;
            Ok(report.pass())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ DcocError::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
