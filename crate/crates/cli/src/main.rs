mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use aggrnet_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aggrnet", version, about = "Train, evaluate and verify AGGRNet classifiers")]
struct Cli {
    /// Run training and evaluation in f64 instead of f32.
    #[arg(long, global = true)]
    float64: bool,
    #[command(subcommand)]
    command: Command,
}

/// Config file plus overrides, shared by the commands that train.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// JSON run config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides `output`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FaultArg {
    FlipKey,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes history.csv, periodic checkpoints and final.ckpt.
    Train(RunArgs),
    /// Evaluate a checkpoint with hard masks; prints a report and writes report.json.
    Eval {
        checkpoint: PathBuf,
        /// Dataset bundle directory. Without it, the data section of the
        /// run config is used.
        #[arg(long)]
        data: Option<PathBuf>,
        /// With config-described data, score the training split instead of
        /// the held-out one.
        #[arg(long)]
        train_split: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Where report.json goes (default: the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the six-variant ablation grid; writes ablation.csv.
    Ablate(RunArgs),
    /// Run the gradient, invariant and metric-oracle suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances for the segregation and metric checks.
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Deliberately break a module to confirm the suite notices.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Print a checkpoint's parameter manifest, thresholds and config.
    Inspect { checkpoint: PathBuf },
    /// Write a synthetic dataset bundle.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.0)]
        difficulty: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure with its process exit code.
pub enum Failure {
    Verify(Vec<String>),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Tensor(_) => 3,
        Error::Numeric(_) => 4,
        Error::Integrity(_) => 5,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("AGGRNET_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("AGGRNET_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    let f64_mode = cli.float64;
    match cli.command {
        Command::Train(args) => commands::train(&args, f64_mode),
        Command::Eval { checkpoint, data, train_split, config, overrides, out } => {
            commands::eval(&checkpoint, data.as_deref(), train_split, config.as_deref(), &overrides, out, f64_mode)
        }
        Command::Ablate(args) => commands::ablate(&args, f64_mode),
        Command::Verify { seed, trials, inject_fault } => commands::verify(seed, trials, inject_fault),
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint),
        Command::Synth { out, classes, per_class, size, difficulty, seed } => {
            commands::synth(&out, classes, per_class, size, difficulty, seed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify(names)) => {
            eprintln!("error: {} check(s) failed: {}", names.len(), names.join(", "));
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
