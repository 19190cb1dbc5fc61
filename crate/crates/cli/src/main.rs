mod commands;
mod config;
mod manifest;

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use sparsenas::Algorithm;

/// Exit status for bad input: flags, config, dataset, genotype or trace.
const EXIT_USAGE: u8 = 1;
/// Exit status when a run aborts after its inputs were accepted.
const EXIT_ABORT: u8 = 2;

/// Input rejected before or while it was being read.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "sparsenas", version, about = "Differentiable architecture search with sparse annealed mixing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Search for a cell genotype and write a run directory.
    Search(SearchArgs),
    /// Train a genotype from scratch and report test accuracy.
    Retrain(RetrainArgs),
    /// Export one edge's probability trajectory from a trace.
    TraceExport(TraceExportArgs),
    /// Run several algorithms over several seeds and tabulate the results.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Dataset directory; synthetic data is generated when omitted.
    #[arg(long, conflicts_with = "manifest")]
    dataset: Option<PathBuf>,
    /// darts-1st, zo-darts or zo-darts-plus.
    #[arg(long, conflicts_with = "manifest")]
    algorithm: Option<Algorithm>,
    #[arg(long, conflicts_with = "manifest")]
    seed: Option<u64>,
    /// Repeat the run described by an existing manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run directory to create or overwrite.
    #[arg(long)]
    out: PathBuf,
    /// Retrain the derived genotype and store the report in the run directory.
    #[arg(long)]
    retrain: bool,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct RetrainArgs {
    /// Genotype file, or a genotype string.
    #[arg(long)]
    genotype: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Number of training seeds, counted up from the configured seed.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Report path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExportFormat {
    Csv,
}

#[derive(Debug, Args)]
struct TraceExportArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Edge index in 0..6.
    #[arg(long)]
    edge: usize,
    #[arg(long, value_enum, default_value_t = ExportFormat::Csv)]
    format: ExportFormat,
    /// Output path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "darts-1st,zo-darts,zo-darts-plus")]
    algorithms: Vec<Algorithm>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Directory for per-run directories and the comparison tables.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, short)]
    quiet: bool,
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("SEARCH_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("SEARCH_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Search(a) => commands::search(a),
        Command::Retrain(a) => commands::retrain(a),
        Command::TraceExport(a) => commands::trace_export(a),
        Command::Compare(a) => commands::compare(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<sparsenas::Error>() {
            use sparsenas::Error::*;
            return match e {
                Parameter { .. } | Validation(_) | Load { .. } | GenotypeParse { .. } | Dimension { .. } => EXIT_USAGE,
                _ => EXIT_ABORT,
            };
        }
    }
    EXIT_ABORT
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match catch_unwind(AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(EXIT_ABORT),
    }
}
