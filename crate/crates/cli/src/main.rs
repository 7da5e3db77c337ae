use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sfr_core::diagnostics::structural_report;
use sfr_core::models::{fixture_description, FIXTURE_NAMES};
use sfr_core::scenario::{load_scenario, output_dir, parse_override, run, Scenario};

/// Slow-fast reduction experiments: simulate, reduce, and check convergence.
#[derive(Parser)]
#[command(name = "sfr", version)]
struct Cli {
    /// Worker threads for replicas (default: all cores). Results do not
    /// depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a scenario, run every validator and print the residual table.
    Validate {
        file: PathBuf,
        /// Patch a scenario field before validation, e.g. `config.T=2`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run a scenario and write report.json, CSV tables and summary.txt.
    Run {
        file: PathBuf,
        /// Output directory (default: the scenario's `output`, else ./out).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// List the built-in model fixtures.
    Fixtures,
}

fn load(file: &Path, overrides: &[String]) -> sfr_core::Result<Scenario> {
    let parsed = overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<sfr_core::Result<Vec<_>>>()?;
    load_scenario(file, &parsed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> sfr_core::Result<u8> {
    match cmd {
        Command::Fixtures => {
            for name in FIXTURE_NAMES {
                println!("{name:<20}{}", fixture_description(name).unwrap_or(""));
            }
            Ok(0)
        }
        Command::Validate { file, overrides } => {
            let sc = load(&file, &overrides)?;
            let report = structural_report(&sc.fixture)?;
            println!("scenario ok: kind {:?}, seed {}", sc.spec.kind, sc.spec.seed);
            for r in &report.records {
                let tol = r.reference.map(|t| format!("{t:.0e}")).unwrap_or_default();
                println!("{:<30}{:>12.3e}  tol {:<8}{}", r.name, r.estimate, tol, r.verdict.as_str());
            }
            Ok(if report.verdict == sfr_core::diagnostics::Verdict::Pass { 0 } else { 1 })
        }
        Command::Run { file, out, overrides } => {
            let sc = load(&file, &overrides)?;
            let dir = output_dir(&sc, out.as_deref());
            let outcome = run(&sc, &dir)?;
            for r in &outcome.reports {
                println!("{:<24}{}", r.name, r.verdict.as_str());
            }
            println!("verdict: {} (artifacts in {})", outcome.verdict.as_str(), dir.display());
            Ok(outcome.exit_code() as u8)
        }
    }
}
