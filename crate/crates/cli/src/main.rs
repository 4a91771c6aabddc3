//! `signgru` command-line tool: synthesize data, train, evaluate, predict
//! and check gradients from one TOML run configuration.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::GradcheckFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl From<signgru::Error> for CliError {
    fn from(e: signgru::Error) -> Self {
        let msg = e.to_string();
        match e {
            _ if e.is_numeric() => CliError::Numeric(msg),
            _ if e.is_data() => CliError::Data(msg),
            signgru::Error::Io(_) => CliError::Io(msg),
            signgru::Error::Shape { .. } => CliError::Data(msg),
            _ => CliError::Config(msg),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "signgru", version, about = "Graph-GRU isolated sign classifier")]
struct Cli {
    /// Run configuration file (TOML); built-in defaults when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set model.stages=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic gesture dataset and write train/val/test files.
    Synth,
    /// Train a model, writing the epoch log and the best checkpoint.
    Train {
        /// Continue from this checkpoint (overrides train.resume).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        /// Defaults to `<output.dir>/best.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        /// Per-class row order by F1: `desc` or `asc`.
        #[arg(long, default_value = "desc")]
        order: String,
    },
    /// Classify every record of a keypoint file.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
    },
    /// Check backpropagated gradients of the small reference model.
    Gradcheck {
        /// Add `--fault-offset` to this parameter's gradient before comparing.
        #[arg(long)]
        fault_param: Option<String>,
        #[arg(long, default_value_t = 1e-3, allow_negative_numbers = true)]
        fault_offset: f64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Synth => commands::synth(&config),
        Command::Train { resume } => commands::train(&config, resume),
        Command::Eval {
            checkpoint,
            split,
            order,
        } => commands::eval(&config, checkpoint, &split, &order),
        Command::Predict { checkpoint, input } => commands::predict(&config, checkpoint, &input),
        Command::Gradcheck {
            fault_param,
            fault_offset,
        } => commands::gradcheck(&config, fault_param, fault_offset),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("signgru: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
