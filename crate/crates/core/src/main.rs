use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fleetmaint::backend::{parse_jsonl, StoreError, Views};
use fleetmaint::sim::{compare_baseline, compute_metrics, load_scenario, run, Mode, RunOptions, ScenarioError};

#[derive(Parser)]
#[command(name = "fleetmaint", version, about = "Predictive-maintenance fleet simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write events.jsonl, report.json, report.csv and raw.jsonl.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Single-threaded run with byte-identical logs (the only mode).
        #[arg(long)]
        deterministic: bool,
        /// Disable in-trip detection; failures are found at arrival.
        #[arg(long)]
        baseline: bool,
    },
    /// Rebuild views and metrics from an event log.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
    /// Print the metrics of an event log.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Run the scenario with and without the platform and print both reports.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

enum Failure {
    Validation(String),
    Integrity(String),
    Other(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Io(_) => Failure::Other(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Integrity(_) => Failure::Integrity(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

fn read_log(path: &PathBuf) -> Result<Vec<fleetmaint::backend::EventRecord>, Failure> {
    let text = std::fs::read_to_string(path)?;
    Ok(parse_jsonl(&text)?)
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("output serializes")
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { scenario, seed, out, deterministic: _, baseline } => {
            let sc = load_scenario(&scenario)?;
            let mode = if baseline { Mode::Baseline } else { Mode::Platform };
            let mut output = run(&sc, &RunOptions { mode, seed });
            output.write_to(&out)?;
            println!("{}", pretty(&output.report));
        }
        Command::Replay { log } => {
            let records = read_log(&log)?;
            let report = compute_metrics(&records)?;
            let views = Views::fold(&records);
            let mut all = serde_json::Map::new();
            for name in fleetmaint::backend::store::VIEW_NAMES {
                all.insert(name.to_string(), views.query(name)?);
            }
            println!("{}", pretty(&serde_json::json!({ "views": all, "report": report })));
        }
        Command::Report { log, format } => {
            let records = read_log(&log)?;
            let mut report = compute_metrics(&records)?;
            report.event_log = Some(log.display().to_string());
            match format {
                Format::Json => println!("{}", pretty(&report)),
                Format::Csv => print!("{}", report.to_csv()),
            }
        }
        Command::Compare { scenario, seed } => {
            let sc = load_scenario(&scenario)?;
            println!("{}", pretty(&compare_baseline(&sc, seed)));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Integrity(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
