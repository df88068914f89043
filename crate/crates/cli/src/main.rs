//! `lab`: runs transport scenarios end to end. `solve` computes and
//! caches the plan and the dual potential for a scenario; the analysis
//! subcommands read that cache and write CSV, JSON, and SVG reports;
//! `emit-report` aggregates a directory of runs.

mod config;
mod report;
mod runner;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "lab", version, about = "Transport regularity laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the structural cost conditions on sampled point pairs.
    CheckCost(RunArgs),
    /// Solve the discrete problem; cache the plan and the potential.
    Solve(RunArgs),
    /// Extract and affinely normalize sections at sampled points.
    Sections(RunArgs),
    /// Measure section engulfing constants across a height ladder.
    Engulf(RunArgs),
    /// Run the Hessian level-set decay ladder.
    Decay(RunArgs),
    /// Integrate the Hessian norm to the p, with and without the mask.
    W2p(RunArgs),
    /// Detect the singular candidate set and render its overlay.
    Singular(RunArgs),
    /// Boundary escape heights and dyadic family sums.
    Boundary(RunArgs),
    /// Aggregate a directory of runs into summary JSON and SVG plots.
    EmitReport(ReportArgs),
    /// Print a built-in scenario, or list their names.
    Preset(PresetArgs),
}

#[derive(Args)]
pub struct RunArgs {
    /// Scenario file (JSON).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Output base directory. Default: the config's `output` field,
    /// then `lab-out`. The LAB_OUT environment variable beats all.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Recompute even when a cached result exists.
    #[arg(long)]
    force: bool,
    /// Worker threads. Default: one per core.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Overrides the scenario seed (and so the scenario hash).
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Directory holding completed runs (scanned one level deep).
    #[arg(long, value_name = "DIR")]
    run_dir: PathBuf,
    /// Worker threads. Default: one per core.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Args)]
pub struct PresetArgs {
    /// Preset name; see --list.
    name: Option<String>,
    /// Write the scenario to a file instead of stdout.
    #[arg(long, value_name = "FILE")]
    write: Option<PathBuf>,
    /// List the available preset names.
    #[arg(long)]
    list: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    /// Bad inputs or configuration; exit 2.
    Validation,
    /// The computation itself broke down; exit 3.
    Numerical,
}

/// Terminal error of a subcommand. Rendered as a one-line JSON report
/// naming the failing operation, on stderr and in the run directory.
#[derive(Debug, Serialize)]
pub struct Failure {
    pub kind: FailureKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub operation: Option<String>,
    pub message: String,
}

impl Failure {
    pub fn validation(message: String) -> Self {
        Failure {
            kind: FailureKind::Validation,
            operation: None,
            message,
        }
    }

    pub fn from_lab(operation: &str, e: lab_core::LabError) -> Self {
        Failure {
            kind: if e.is_validation() {
                FailureKind::Validation
            } else {
                FailureKind::Numerical
            },
            operation: Some(operation.to_string()),
            message: e.to_string(),
        }
    }

    pub fn with_operation(mut self, operation: &str) -> Self {
        self.operation.get_or_insert_with(|| operation.to_string());
        self
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            FailureKind::Validation => 2,
            FailureKind::Numerical => 3,
        }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Wrapper<'a> {
            error: &'a Failure,
        }
        serde_json::to_string(&Wrapper { error: self }).expect("failure serializes")
    }
}

fn init_threads(threads: Option<usize>) -> Result<(), Failure> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(Failure::validation("--threads must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::validation(format!("thread pool: {e}")))
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    use runner::Analysis;
    match cli.command {
        Command::CheckCost(a) => runner::run(Analysis::CheckCost, a),
        Command::Solve(a) => runner::run(Analysis::Solve, a),
        Command::Sections(a) => runner::run(Analysis::Sections, a),
        Command::Engulf(a) => runner::run(Analysis::Engulf, a),
        Command::Decay(a) => runner::run(Analysis::Decay, a),
        Command::W2p(a) => runner::run(Analysis::W2p, a),
        Command::Singular(a) => runner::run(Analysis::Singular, a),
        Command::Boundary(a) => runner::run(Analysis::Boundary, a),
        Command::EmitReport(a) => {
            init_threads(a.threads)?;
            report::emit(&a.run_dir)
        }
        Command::Preset(a) => run_preset(a),
    }
}

fn run_preset(args: PresetArgs) -> Result<(), Failure> {
    if args.list {
        for name in config::PRESET_NAMES {
            println!("{name}");
        }
        return Ok(());
    }
    let Some(name) = args.name.as_deref() else {
        return Err(Failure::validation(
            "preset needs a name or --list".into(),
        ));
    };
    let Some(cfg) = config::preset(name) else {
        return Err(Failure::validation(format!(
            "unknown preset '{name}'; available: {}",
            config::PRESET_NAMES.join(", ")
        )));
    };
    let text = serde_json::to_string_pretty(&cfg)
        .map_err(|e| Failure::validation(e.to_string()))?;
    match args.write {
        Some(path) => std::fs::write(&path, text + "\n").map_err(|e| {
            Failure::validation(format!("cannot write {}: {e}", path.display()))
        })?,
        None => println!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.exit_code())
        }
    }
}
