use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mflow_cli::config::Scenario;
use mflow_cli::output::output_dir;
use mflow_cli::{parse_config, run_with_threads, write_outputs, CliError, EXIT_FAILURE, EXIT_PASS};

#[derive(Parser)]
#[command(name = "mflow", version, about = "Monte Carlo checks of Itô formulas along flows of measures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML experiment configuration.
    config: PathBuf,
    /// Output directory (default: config `output.dir`, then $MFLOW_OUT, then ./mflow-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `ensemble.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Verify an identity: measure_flow, extended or time_linear scenarios.
    Verify(RunArgs),
    /// Run an inequality diagnostic.
    Diagnose(RunArgs),
    /// Run a convergence study.
    Sweep(RunArgs),
}

fn execute(command: Command) -> Result<bool, CliError> {
    let (args, allowed): (RunArgs, &[Scenario]) = match command {
        Command::Verify(a) => (a, &[Scenario::MeasureFlow, Scenario::Extended, Scenario::TimeLinear]),
        Command::Diagnose(a) => (a, &[Scenario::Diagnostic]),
        Command::Sweep(a) => (a, &[Scenario::Convergence]),
    };
    let text = std::fs::read_to_string(&args.config).map_err(|source| CliError::Io {
        path: args.config.clone(),
        source,
    })?;
    let mut config = parse_config(&text).map_err(CliError::Config)?;
    if !allowed.contains(&config.scenario) {
        return Err(CliError::Usage(format!(
            "scenario `{}` is not handled by this command",
            config.scenario.as_str()
        )));
    }
    if let Some(seed) = args.seed {
        config.ensemble.seed = seed;
    }
    let report = run_with_threads(&config, args.threads)?;
    let dir = output_dir(&report, args.out.as_deref());
    for path in write_outputs(&report, &dir)? {
        println!("wrote {}", path.display());
    }
    println!("{}: {}", if report.pass { "PASS" } else { "FAIL" }, report.rule);
    for note in &report.notes {
        println!("note: {note}");
    }
    Ok(report.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::from(EXIT_PASS as u8),
        Ok(false) => ExitCode::from(EXIT_FAILURE as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
