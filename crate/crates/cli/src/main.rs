use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use peerselect::harness::{self, ConfigError, ReportFormat, RunError};

#[derive(Parser)]
#[command(
    name = "peerselect",
    version,
    about = "Efficient-peer selection simulator for deadline-driven desktop-grid jobs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its report.
    Run {
        /// Scenario file (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run this many consecutive seeds starting at the scenario seed.
        #[arg(long)]
        sweep: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

const EXIT_CONFIG: u8 = 1;
const EXIT_IO: u8 = 2;

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn run(config: PathBuf, seed: Option<u64>, format: Format, out: Option<PathBuf>, sweep: Option<u64>) -> ExitCode {
    let loaded = match harness::load_config(&config) {
        Ok(l) => l,
        Err(e @ ConfigError::Io { .. }) => return fail(EXIT_IO, e),
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let first_seed = seed.unwrap_or(loaded.config.seed);
    let format = ReportFormat::from(format);
    let bytes = match sweep {
        Some(count) => harness::sweep(&loaded.config, first_seed, count)
            .map_err(|e| fail_run(&e))
            .and_then(|s| harness::emit_sweep_report(&s, format).map_err(|e| fail(EXIT_CONFIG, e))),
        None => harness::run_scenario_seeded(&loaded.config, first_seed)
            .map_err(|e| fail_run(&e))
            .and_then(|s| harness::emit_report(&s, format).map_err(|e| fail(EXIT_CONFIG, e))),
    };
    let bytes = match bytes {
        Ok(b) => b,
        Err(code) => return code,
    };
    let written = match &out {
        Some(path) => fs::write(path, &bytes),
        None => io::stdout().lock().write_all(&bytes),
    };
    match written {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(EXIT_IO, e),
    }
}

fn fail_run(e: &RunError) -> ExitCode {
    fail(EXIT_CONFIG, e)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed,
            format,
            out,
            sweep,
        } => run(config, seed, format, out, sweep),
    }
}
