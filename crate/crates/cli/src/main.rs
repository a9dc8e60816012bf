//! Command-line driver: ingest records, simulate data, run the experiment.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod cache;
mod commands;
mod config;

use config::{NoCourses, UsageError};

#[derive(Parser)]
#[command(name = "gradepred", version, about = "Predict next-term course grades from past grades")]
struct Cli {
    /// More logging (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate raw records and write them in canonical form.
    Ingest(IngestArgs),
    /// Generate synthetic records with planted structure.
    Simulate(SimulateArgs),
    /// Train, select and evaluate the requested methods.
    Run(RunArgs),
    /// Print dataset statistics for each prior-course floor.
    Stats(StatsArgs),
    /// Show a method's grid, or score every cell of it on data.
    Grid(GridArgs),
}

#[derive(Args)]
pub struct IngestArgs {
    /// Raw records with a `student,course,term,grade` header.
    #[arg(long)]
    pub input: PathBuf,
    /// Where to write the canonical records.
    #[arg(long)]
    pub output: PathBuf,
    /// File with one permitted course id per line.
    #[arg(long)]
    pub allow_list: Option<PathBuf>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// TOML file with generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set n_students=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where to write the records.
    #[arg(long)]
    pub output: PathBuf,
    /// Where to write the planted parameters (default: next to the output).
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

/// Options shared by `run`, `stats` and `grid`. Every one may also come from
/// the `--config` file; flags win.
#[derive(Args, Clone, Default)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Canonical records file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Term whose grades are predicted (default: the last term in the data).
    #[arg(long)]
    pub target_term: Option<u32>,
    /// Prior-course floors, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    /// Minimum number of training students per course.
    #[arg(long)]
    pub min_students: Option<usize>,
    /// Directory for cached course datasets.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args, Default)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output directory.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Methods, comma separated: csr,csr-rc,ssr,biasonly,sbcf,mf,mf-gb,csmf,csmf-star.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    /// Selection policy for every method: test-best, prior-semester or holdout.
    #[arg(long)]
    pub policy: Option<String>,
    /// Override a grid, e.g. `--grid csr.lambda1=0,2.5`.
    #[arg(long = "grid", value_name = "METHOD.PARAM=V1,V2")]
    pub grids: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Clamp predictions to the grade range.
    #[arg(long)]
    pub clamp: bool,
    /// Also score every method on the grades predicted at every k.
    #[arg(long)]
    pub common_subset: bool,
    /// Training epochs of the factorization methods.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Also write stats.csv and stats.txt here.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// The method whose grid to show or score.
    #[arg(long)]
    pub method: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Run(a) => commands::run(a),
        Command::Stats(a) => commands::stats(a),
        Command::Grid(a) => commands::grid(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        // The reader went away (e.g. `| head`); nothing left to report.
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.downcast_ref::<UsageError>().is_some() {
                1
            } else if e.downcast_ref::<NoCourses>().is_some() {
                3
            } else {
                2
            };
            ExitCode::from(code)
        }
    }
}

fn broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| c.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe))
}
