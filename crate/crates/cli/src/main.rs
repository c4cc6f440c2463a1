use std::path::PathBuf;
use std::process::ExitCode;

use admissions_core::{Error, ErrorKind};
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod files;

/// Single-score admissions markets with multinomial-logit preferences.
#[derive(Parser, Debug)]
#[command(name = "admissions", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Equilibrium cutoffs, demand and certificate of a market.
    Solve(SolveArgs),
    /// Tâtonnement trajectory (simultaneous or deferred-acceptance style).
    Iterate(IterateArgs),
    /// Sampled rosters matched by deferred acceptance and by cutoff choice.
    Simulate(SimulateArgs),
    /// Comparative-statics Jacobians, one CSV per matrix.
    Statics(StaticsArgs),
    /// Preferability weights from observed cutoffs and demand.
    Invert(InvertArgs),
    /// Observation file from college score statistics and percentile tables.
    Ingest(IngestArgs),
    /// One school's demand curve and the cutoff reaching a target class size.
    Curve(CurveArgs),
}

#[derive(Args, Debug)]
struct MarketArgs {
    /// Market CSV with columns school, gamma|delta|gamma_or_delta, q.
    #[arg(long)]
    market: PathBuf,
    /// Read a gamma_or_delta column as log-weights.
    #[arg(long)]
    delta: bool,
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Output directory, created if needed.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[command(flatten)]
    market: MarketArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Tolerance of the equilibrium certificate.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum IterateMode {
    Simultaneous,
    Da,
}

#[derive(Args, Debug)]
pub struct IterateArgs {
    #[command(flatten)]
    market: MarketArgs,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, value_enum, default_value = "simultaneous")]
    mode: IterateMode,
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    #[arg(long, default_value_t = 0.01)]
    beta: f64,
    #[arg(long, default_value_t = 1e-12)]
    epsilon: f64,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    /// Initial cutoffs, comma separated; a single value applies to all schools.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    p0: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    market: MarketArgs,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Roster sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [20, 200, 2000])]
    n_students: Vec<usize>,
    /// Additional seed sweep: number of consecutive seeds starting at --seed.
    #[arg(long, default_value_t = 0)]
    sweep: usize,
    /// Run the seed sweep on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
pub struct StaticsArgs {
    #[command(flatten)]
    market: MarketArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Cutoffs for the unconstrained Jacobians; defaults to the equilibrium.
    #[arg(long, value_delimiter = ',')]
    at: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Method {
    Recursion,
    Rootfind,
    Auto,
}

#[derive(Args, Debug)]
pub struct InvertArgs {
    /// Observation CSV with columns name, cutoff, demand_fraction.
    #[arg(long)]
    obs: PathBuf,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, value_enum, default_value = "auto")]
    method: Method,
    /// Population scaling demand shares to counts; defaults to the count
    /// column of the observation file.
    #[arg(long)]
    population: Option<f64>,
    /// Write the estimate even if the root-finder did not converge.
    #[arg(long)]
    allow_unconverged: bool,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// College statistics CSV.
    #[arg(long)]
    colleges: PathBuf,
    /// Percentile table CSV (test,score,percentile).
    #[arg(long)]
    tables: PathBuf,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
pub struct CurveArgs {
    #[arg(long)]
    obs: PathBuf,
    #[command(flatten)]
    out: OutArgs,
    /// School name as it appears in the observation file.
    #[arg(long)]
    school: String,
    /// Target class size, in the same units as the population.
    #[arg(long)]
    target: Option<f64>,
    #[arg(long)]
    population: Option<f64>,
    #[arg(long, value_enum, default_value = "auto")]
    method: Method,
    /// Number of grid intervals.
    #[arg(long, default_value_t = 200)]
    points: usize,
    #[arg(long, default_value_t = 0.0)]
    lo: f64,
    #[arg(long, default_value_t = 1.0)]
    hi: f64,
}

fn exit_code(err: &Error) -> u8 {
    if let Error::Config(_) = err {
        return 2;
    }
    match err.kind() {
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Solve(a) => commands::solve(&a),
        Command::Iterate(a) => commands::iterate(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Statics(a) => commands::statics(&a),
        Command::Invert(a) => commands::invert(&a),
        Command::Ingest(a) => commands::ingest(&a),
        Command::Curve(a) => commands::curve(&a),
    };
    match result {
        Ok(written) => {
            for path in written {
                println!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
