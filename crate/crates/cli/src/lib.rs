//! Command-line driver for GMoE experiments.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Engine(#[from] gmoe::Error),

    #[error("{0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Engine(_) | CliError::Check(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Engine(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "gmoe", version, about = "Graph mixture-of-experts experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the hop-mixture dataset as JSON lines.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model, or sweep a grid of (n, m, k, lambda) cells.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Sweep n over grid.n, m over {0, n/2, n}, k over grid.k and
        /// lambda over grid.lambda.
        #[arg(long)]
        grid: bool,
        /// Run grid cells in parallel.
        #[arg(long, requires = "grid")]
        parallel: bool,
        /// Single-expert GMoE (n = m = k = 1).
        #[arg(long, conflicts_with = "grid")]
        baseline: bool,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Compare GMoE layer flops against the plain layer.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Check every n in grid.n, m in {0, n/2, n} and k in grid.k.
        #[arg(long)]
        grid: bool,
    },
    /// Check analytic gradients of every loss term.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Per-layer, per-expert routing statistics of a checkpoint.
    GateStats {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
}

fn resolve(common: &Common, extra: Vec<String>) -> Result<RunConfig, CliError> {
    let mut overrides = common.set.clone();
    overrides.extend(extra);
    RunConfig::resolve(common.config.as_deref(), &overrides)
}

fn path_overrides(pairs: &[(&str, &Option<PathBuf>)]) -> Vec<String> {
    pairs
        .iter()
        .filter_map(|(k, v)| v.as_ref().map(|p| format!("{k}={}", p.display())))
        .collect()
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { common } => commands::gen_data(&resolve(&common, vec![])?, &common.out),
        Command::Train {
            common,
            dataset,
            grid,
            parallel,
            baseline,
        } => {
            let mut extra = path_overrides(&[("dataset", &dataset)]);
            if baseline {
                extra.extend(["moe=true", "n=1", "m=1", "k=1"].map(String::from));
            }
            let cfg = resolve(&common, extra)?;
            if grid {
                commands::train_grid(&cfg, &common.out, parallel)
            } else {
                commands::train(&cfg, &common.out)
            }
        }
        Command::Eval { common, inputs } => {
            let cfg = resolve(&common, path_overrides(&[("checkpoint", &inputs.checkpoint), ("dataset", &inputs.dataset)]))?;
            commands::eval(&cfg, &common.out)
        }
        Command::Flops { common, grid } => commands::flops(&resolve(&common, vec![])?, &common.out, grid),
        Command::Gradcheck { common } => commands::gradcheck(&resolve(&common, vec![])?, &common.out),
        Command::GateStats { common, inputs } => {
            let cfg = resolve(&common, path_overrides(&[("checkpoint", &inputs.checkpoint), ("dataset", &inputs.dataset)]))?;
            commands::gate_stats(&cfg, &common.out)
        }
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
