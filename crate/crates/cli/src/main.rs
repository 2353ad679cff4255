mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Benchmarks and profile tooling for the amtprof task runtime.
#[derive(Debug, Parser)]
#[command(name = "amtprof", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the workload once and write profile artifacts.
    Bench(BenchArgs),
    /// Measure profiling overhead against a run without hooks.
    Overhead(OverheadArgs),
    /// Strong-scaling sweep over several locality counts.
    Sweep(SweepArgs),
    /// Convert a binary snapshot into CSV, trace and DOT files.
    Export(ExportArgs),
    /// Compare two profile CSVs by mean task time.
    Diff(DiffArgs),
    /// Merge snapshot files into one profile.
    Aggregate(AggregateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Transport {
    Inproc,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Workload configuration file (key = value lines). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub localities: u32,
    #[arg(long, value_enum, default_value_t = Transport::Inproc)]
    pub transport: Transport,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub profile: Switch,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Report this computation time instead of the measured one.
    #[arg(long, hide = true)]
    pub inject_time: Option<f64>,
}

#[derive(Debug, Args)]
pub struct OverheadArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub localities: u32,
    #[arg(long, default_value_t = 3)]
    pub repetitions: usize,
    /// Write the overhead CSV here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip the runs and use WITH,WITHOUT seconds as the measured times.
    #[arg(long, hide = true, value_name = "WITH,WITHOUT")]
    pub inject_times: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Workload configuration file. Defaults to the built-in scaling setup.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ascending locality counts.
    #[arg(long, value_delimiter = ',', default_values_t = [1u32, 2, 4])]
    pub localities: Vec<u32>,
    #[arg(long, default_value_t = 1)]
    pub repetitions: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip the runs; one WITH,WITHOUT pair per count, separated by ';'.
    #[arg(long, hide = true)]
    pub inject_times: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub snapshot: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Flag names whose mean ratio is at least this far from 1 either way.
    #[arg(long, default_value_t = 2.0)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Snapshot files to merge.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Write the merged snapshot here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the merged profile CSV here instead of standard output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, unreadable or malformed input. Exit 1.
    Usage(anyhow::Error),
    /// The run itself failed. Exit 2.
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        }
    }
}

pub type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Bench(a) => commands::bench(&a),
        Command::Overhead(a) => commands::overhead(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Export(a) => commands::export(&a),
        Command::Diff(a) => commands::diff(&a),
        Command::Aggregate(a) => commands::aggregate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
