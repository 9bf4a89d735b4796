// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "forecite", version, about = "Citation-rate regression on scholarly documents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[command(flatten)]
    pub run: ConfigArg,
    /// Defaults to `<output_dir>/model.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter and deduplicate a JSONL corpus.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// FilterPolicy JSON; defaults apply when omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        cutoff: Option<String>,
    },
    /// Generate a synthetic corpus with a planted signal.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// SignalSpec JSON; missing fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Two-phase training; writes a checkpoint and manifest.
    Train(ConfigArg),
    /// Metrics of a checkpoint on the train and test splits.
    Evaluate(CheckpointArgs),
    /// Rolling correlation over monthly cohorts after `holdout_from`.
    Holdout(CheckpointArgs),
    /// Retrain with one document field removed.
    Ablate {
        #[command(flatten)]
        run: ConfigArg,
        #[arg(long, value_parser = ["title", "abstract"])]
        drop: String,
    },
    /// Train every (model size, data fraction) cell of the config's grid.
    Grid {
        #[command(flatten)]
        run: ConfigArg,
        /// Concurrent cells; overrides FORECITE_WORKERS.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Fit the tanh scaling law to a grid CSV.
    FitScaling {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Token attributions and heatmaps for test documents.
    Saliency {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Document ids; the first `--n` test documents when empty.
        #[arg(long = "doc")]
        docs: Vec<String>,
        #[arg(long, default_value_t = 5)]
        n: usize,
    },
}

/// Maps onto the process exit status: bad inputs exit 1, everything else 2.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    pub fn validation(msg: impl Into<String>) -> Self {
        Failure::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure::Runtime(msg.into())
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<forecite::Error> for Failure {
    fn from(e: forecite::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Ingest { input, out, policy, cutoff } => commands::ingest(&input, &out, policy.as_deref(), cutoff.as_deref()),
        Command::Synth { n, seed, out, spec } => commands::synth(n, seed, &out, spec.as_deref()),
        Command::Train(a) => commands::train(&a.config),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Holdout(a) => commands::holdout(&a),
        Command::Ablate { run, drop } => commands::ablate(&run.config, &drop),
        Command::Grid { run, workers } => commands::grid(&run.config, workers),
        Command::FitScaling { grid, metric, split, out } => {
            commands::fit_scaling(&grid, metric.as_deref(), split.as_deref(), out.as_deref())
        }
        Command::Saliency { ckpt, docs, n } => commands::saliency(&ckpt, &docs, n),
    }
}
