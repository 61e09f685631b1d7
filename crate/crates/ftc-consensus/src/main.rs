use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::Array2;
use thiserror::Error;

use ftc_consensus::graph::{laplacians, spectral_check};
use ftc_consensus::scenario::{Scenario, ScenarioError};
use ftc_consensus::sim::{SimError, Simulation};
use ftc_consensus::trace::{RunSummary, Trace, TraceError};

#[derive(Parser)]
#[command(
    name = "ftc-consensus",
    version,
    about = "Simulates adaptive fault-tolerant cooperative tracking on a leader-follower network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write its trace as CSV
    Run {
        /// Scenario file
        scenario: PathBuf,
        /// Override the integration step, in seconds
        #[arg(long)]
        dt: Option<f64>,
        /// Override the final time, in seconds
        #[arg(long)]
        t_end: Option<f64>,
        /// Trace destination, overriding the scenario's output path
        #[arg(long)]
        output: Option<PathBuf>,
        /// Keep the baseline controller after detection (diagnosis still runs)
        #[arg(long)]
        disable_ftc: bool,
        /// Override the switching boundary layer; 0 means hard switching
        #[arg(long)]
        sgn_layer: Option<f64>,
    },
    /// Print the network matrices, their spectrum, and the consensus verdict
    VerifyGraph {
        /// Scenario file
        scenario: PathBuf,
    },
    /// Report detection, isolation, and tracking figures from a trace
    Summarize {
        /// Trace file produced by `run`
        trace: PathBuf,
    },
}

/// Exit codes: 2 for malformed input, 3 for input that parses but violates
/// a documented constraint, 4 for failures while running or writing.
#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("{0}")]
    Verdict(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Scenario(e) => scenario_code(e),
            CliError::Sim(SimError::Scenario(e)) => scenario_code(e),
            CliError::Sim(SimError::Graph(_)) | CliError::Sim(SimError::Plant(_)) => 3,
            CliError::Sim(_) => 4,
            CliError::Trace(TraceError::Io(_)) => 4,
            CliError::Trace(_) => 2,
            CliError::Verdict(_) => 3,
        }
    }
}

fn scenario_code(err: &ScenarioError) -> u8 {
    match err {
        ScenarioError::Parse(_) => 2,
        ScenarioError::Invalid { .. } => 3,
        ScenarioError::Io { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            dt,
            t_end,
            output,
            disable_ftc,
            sgn_layer,
        } => run(&scenario, dt, t_end, output, disable_ftc, sgn_layer),
        Command::VerifyGraph { scenario } => verify_graph(&scenario),
        Command::Summarize { trace } => summarize(&trace),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn run(
    path: &PathBuf,
    dt: Option<f64>,
    t_end: Option<f64>,
    output: Option<PathBuf>,
    disable_ftc: bool,
    sgn_layer: Option<f64>,
) -> Result<(), CliError> {
    let mut scenario = Scenario::load(path)?;
    if let Some(dt) = dt {
        scenario.integration.dt_s = dt;
    }
    if let Some(t_end) = t_end {
        scenario.integration.t_end_s = t_end;
    }
    if let Some(layer) = sgn_layer {
        scenario.integration.sgn_layer = layer;
    }
    if disable_ftc {
        scenario.toggles.disable_ftc = true;
    }
    if let Some(dest) = output {
        scenario.output.path = Some(dest);
    }

    let result = Simulation::run(&scenario)?;
    let dest = scenario
        .output
        .path
        .clone()
        .unwrap_or_else(|| PathBuf::from("trace.csv"));
    result.trace.write_csv(&dest)?;

    if result.events.events().is_empty() {
        println!("no events");
    }
    for event in result.events.events() {
        println!("{event}");
    }
    if result.bound_margin < 0.0 {
        eprintln!(
            "warning: disturbance exceeded its declared envelope by {:.3e}; \
             threshold guarantees do not apply to this run",
            -result.bound_margin
        );
    }
    print!("{}", RunSummary::from_trace(&result.trace)?);
    println!("trace written to {}", dest.display());
    Ok(())
}

fn verify_graph(path: &PathBuf) -> Result<(), CliError> {
    let scenario = Scenario::load(path)?;
    let topology = scenario.build_topology()?;
    let lap = laplacians(&topology);

    println!("directed Laplacian L (leader row last, all zero):");
    print_matrix(&lap.directed);
    println!("undirected Laplacian Psi:");
    print_matrix(&lap.undirected);
    println!("symmetrized product Psi*L + L'*Psi:");
    print_matrix(&lap.symmetrized);

    let spectrum = spectral_check(&lap.symmetrized, 1e-8).map_err(SimError::Graph)?;
    println!("eigenvalues (ascending):");
    for value in &spectrum.eigenvalues {
        println!("  {value:+.12e}");
    }

    let min = spectrum.eigenvalues.first().copied().unwrap_or(f64::NAN);
    if spectrum.zero_multiplicity == 1 && min >= -1e-8 {
        println!("verdict: PASS (positive semidefinite, simple zero eigenvalue)");
        Ok(())
    } else {
        println!(
            "verdict: FAIL (zero multiplicity {}, smallest eigenvalue {:+.3e})",
            spectrum.zero_multiplicity, min
        );
        Err(CliError::Verdict(
            "the network does not certify leader-follower consensus".to_string(),
        ))
    }
}

fn summarize(path: &PathBuf) -> Result<(), CliError> {
    let trace = Trace::read_csv(path)?;
    print!("{}", RunSummary::from_trace(&trace)?);
    Ok(())
}

fn print_matrix(matrix: &Array2<f64>) {
    for row in matrix.rows() {
        let cells: Vec<String> = row
            .iter()
            .map(|v| format!("{:8.3}", if *v == 0.0 { 0.0 } else { *v }))
            .collect();
        println!("  [{}]", cells.join(" "));
    }
}
