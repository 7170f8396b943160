//! `wearseg`: one binary driving data synthesis, augmentation, training,
//! evaluation, prediction and the acquisition timing table.

mod commands;
mod config;
mod dataset;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "wearseg", version, about = "Tool-wear segmentation toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run configuration file (`section.key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory receiving outputs, the resolved config and the run manifest.
    #[arg(long, global = true, default_value = "wearseg-out")]
    pub out_dir: PathBuf,
    /// `section.key=value` override applied after the config file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a synthetic dataset (and optionally a wear sequence).
    Synth {
        /// Also write the `series` wear sequence to `<out-dir>/sequence`.
        #[arg(long)]
        sequence: bool,
    },
    /// Expands the training subset of a dataset with augmented copies.
    Augment {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Trains a model on a dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Resumes training from a checkpoint.
    Continue {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Writes per-image and aggregate IoU of a checkpoint on a subset.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        subset: String,
    },
    /// Writes `<stem>_mask.png` beside each input image.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Per-class predicted pixel counts over a wear sequence.
    Series {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sequence directory; a synthetic sequence is generated when absent.
        #[arg(long)]
        sequence: Option<PathBuf>,
    },
    /// Filter-scale by batch-size grid search.
    Grid {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Bayesian search over the adhesive and spalling class weights, scored by
    /// the best validation adhesive-wear IoU.
    Bayes {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Trigger offset, exposure displacement and blur for target displacements.
    Timing,
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn set_path(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = resolve(&cli.common)?;
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))?;
    }
    let ctx = commands::Context::new(&cli.common);
    match cli.command {
        Command::Synth { sequence } => commands::synth(&ctx, cfg, sequence),
        Command::Augment { data } => {
            set_path(&mut cfg.paths.data, data);
            commands::augment(&ctx, cfg)
        }
        Command::Train { data } => {
            set_path(&mut cfg.paths.data, data);
            commands::train(&ctx, cfg)
        }
        Command::Continue { data, checkpoint } => {
            set_path(&mut cfg.paths.data, data);
            set_path(&mut cfg.paths.checkpoint, checkpoint);
            commands::resume(&ctx, cfg)
        }
        Command::Eval {
            data,
            checkpoint,
            subset,
        } => {
            set_path(&mut cfg.paths.data, data);
            set_path(&mut cfg.paths.checkpoint, checkpoint);
            commands::eval(&ctx, cfg, &subset)
        }
        Command::Predict { checkpoint, inputs } => {
            set_path(&mut cfg.paths.checkpoint, checkpoint);
            commands::predict(&ctx, cfg, &inputs)
        }
        Command::Series { checkpoint, sequence } => {
            set_path(&mut cfg.paths.checkpoint, checkpoint);
            set_path(&mut cfg.paths.sequence, sequence);
            commands::series(&ctx, cfg)
        }
        Command::Grid { data } => {
            set_path(&mut cfg.paths.data, data);
            commands::grid(&ctx, cfg)
        }
        Command::Bayes { data } => {
            set_path(&mut cfg.paths.data, data);
            commands::bayes(&ctx, cfg)
        }
        Command::Timing => commands::timing(&ctx, cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
