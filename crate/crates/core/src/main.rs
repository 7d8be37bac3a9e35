use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use virtint::scenario;
use virtint::selftest::{self, Fault};
use virtint::{Error, Result};

/// Virtual integration and heat-flow experiments.
#[derive(Parser)]
#[command(name = "virtint", version)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file (JSON, schema version 1).
    Run {
        scenario: PathBuf,
        /// Write the report here instead of the path named in the scenario.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in fixed-seed checks.
    Selftest {
        #[arg(long, default_value_t = selftest::DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true, value_parser = ["adjugate-sign"])]
        inject_fault: Option<String>,
    },
}

fn emit(report: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, report).map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
        None => {
            print!("{report}");
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    }
    match cli.command {
        Command::Run { scenario: path, out } => {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let outcome = scenario::run_text(&text)?;
            emit(&outcome.report, out.as_deref().or(outcome.path.as_deref()))?;
            Ok(outcome.contracts_held)
        }
        Command::Selftest { seed, out, inject_fault } => {
            let fault = inject_fault.map(|_| Fault::AdjugateSign);
            let report = selftest::run(seed, fault)?;
            emit(&report.to_json(), out.as_deref())?;
            Ok(report.pass)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap reports usage errors as 2, which is reserved for violated contracts
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("virtint: contract violated");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("virtint: {e}");
            ExitCode::from(1)
        }
    }
}
