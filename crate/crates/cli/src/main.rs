use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::LevelFilter;

use recal_cli::{cmd_ambiguity, cmd_calibrate, cmd_detect, cmd_mission, CliError, Scenario};

#[derive(Parser)]
#[command(name = "recal", version, about = "Fault detection and kinematic recalibration for a simulated 7-DOF arm")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scenario JSON; defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, env = "MANIP_RECAL_OUT", default_value = "recal-out")]
    out: PathBuf,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Experiment design plus identification, then validation on fresh poses.
    Calibrate,
    /// Runs the detection engine on scripted telemetry.
    Detect,
    /// Replays the mission with detection and recovery in the loop.
    Mission,
    /// Prints the ambiguity-group table.
    Ambiguity,
}

fn run(cli: &Cli) -> Result<recal_cli::Outcome, CliError> {
    let scenario = match &cli.config {
        Some(p) => Scenario::load(p)?,
        None => Scenario::default(),
    }
    .with_seed(cli.seed);
    scenario.validate()?;
    match cli.command {
        Command::Calibrate => cmd_calibrate(&scenario, &cli.out),
        Command::Detect => cmd_detect(&scenario, &cli.out),
        Command::Mission => cmd_mission(&scenario, &cli.out),
        Command::Ambiguity => cmd_ambiguity(&scenario, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_default_env()
        .filter_level(if cli.quiet { LevelFilter::Error } else { LevelFilter::Info })
        .parse_default_env()
        .init();
    match run(&cli) {
        Ok(outcome) => {
            if !cli.quiet {
                println!("{}", outcome.message);
                for a in &outcome.artifacts {
                    println!("wrote {}", a.display());
                }
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("recal: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
