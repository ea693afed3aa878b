use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ordfix::records::{explain, TraceFile};
use ordfix::scenario::{Overrides, Scenario, ScenarioError, ScenarioReport, Selection};
use ordfix::Ordinal;

// a closed pipe (e.g. `| head`) is not an error worth a panic
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(io::stdout(), $($arg)*);
    }};
}

/// Transfinite fixed-point runner.
#[derive(Debug, Parser)]
#[command(name = "ordfix", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Execute every directive of a scenario and write its artifacts.
    Run(RunArgs),
    /// Render a trace file as a stage table.
    Explain { trace: PathBuf },
    /// Parse and validate a scenario without running it.
    Check(RunArgs),
    /// Execute only the oracle-check directives of a scenario.
    Oracle(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Seed for sampled checks.
    #[arg(long)]
    seed: Option<u64>,
    /// Default stage budget, as an ordinal (e.g. `w*10`).
    #[arg(long)]
    budget: Option<Ordinal>,
    /// Default agreement tolerance for metric spaces.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Artifact directory [default: out/<scenario name>].
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<Scenario, ScenarioError> {
        Scenario::load(
            &self.scenario,
            &Overrides {
                seed: self.seed,
                budget: self.budget.clone(),
                tolerance: self.tolerance,
            },
        )
    }

    fn out_dir(&self, scenario: &Scenario) -> PathBuf {
        self.out_dir
            .clone()
            .unwrap_or_else(|| Path::new("out").join(scenario.name()))
    }
}

fn execute(args: &RunArgs, selection: Selection) -> Result<ExitCode, ScenarioError> {
    let scenario = args.load()?;
    let report: ScenarioReport = scenario.run(selection);
    for run in &report.runs {
        say!("{}", run.summary_line());
    }
    let dir = args.out_dir(&scenario);
    report.write(&dir)?;
    say!("artifacts written to {}", dir.display());
    Ok(if report.success() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn check(args: &RunArgs) -> Result<ExitCode, ScenarioError> {
    let scenario = args.load()?;
    let d = scenario.defaults();
    say!("scenario {}: ok", scenario.name());
    say!(
        "defaults: seed={} tolerance={:e} budget={} window={} limit_cap={} dense_cap={} samples={}",
        d.seed,
        d.tolerance,
        d.budget,
        d.window,
        d.limit_cap,
        d.dense_cap,
        d.samples
    );
    for name in scenario.run_names() {
        say!("run {name}");
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => execute(args, Selection::All),
        Command::Oracle(args) => execute(args, Selection::OracleOnly),
        Command::Check(args) => check(args),
        Command::Explain { trace } => {
            let shown = fs::read_to_string(trace)
                .map_err(|e| e.to_string())
                .and_then(|text| TraceFile::parse_jsonl(&text).map_err(|e| e.to_string()))
                .and_then(|file| explain(&file).map_err(|e| e.to_string()));
            return match shown {
                Ok(table) => {
                    let _ = io::stdout().write_all(table.as_bytes());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {}: {e}", trace.display());
                    ExitCode::from(2)
                }
            };
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
