//! Command-line surface: prepare a dataset cache, train (with seeds and
//! ablation switches), evaluate checkpoints, grouped evaluation, margin
//! diagnostics, embedding export, and hyperparameter sweeps.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error,
//! 3 numerical failure.

mod commands;
mod manifest;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<rgcl::dataset::DataError> for CliError {
    fn from(e: rgcl::dataset::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<rgcl::trainer::TrainError> for CliError {
    fn from(e: rgcl::trainer::TrainError) -> Self {
        use rgcl::trainer::TrainError::*;
        match e {
            InvalidConfig(_) => CliError::Usage(e.to_string()),
            NonFinite { .. } => CliError::Numerical(e.to_string()),
            EmptyTrain | CheckpointIo(_) | BadCheckpoint(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "rgcl",
    version,
    about = "Robust graph-contrastive collaborative filtering engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw interaction log, binarize, filter, split 8:1:1, and
    /// write the dataset cache.
    Prepare {
        /// Raw delimiter-separated interaction file.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for the cache.
        #[arg(long)]
        output: PathBuf,
        /// Column roles in file order, e.g. `user,item,rating,timestamp`.
        #[arg(long, default_value = "user,item,rating,timestamp")]
        schema: String,
        /// Field delimiter (auto-detects tab/comma when omitted; use
        /// `::` for MovieLens-1M).
        #[arg(long)]
        delimiter: Option<String>,
        /// Keep interactions with rating strictly above this value.
        #[arg(long, default_value_t = 3.0)]
        threshold: f64,
        /// Iteratively drop users/items with fewer interactions.
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        /// Split ratios as `train,valid,test`.
        #[arg(long, default_value = "8,1,1")]
        ratios: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train one or more seeds; writes checkpoints, logs, reports, and a
    /// manifest per run.
    Train {
        /// Dataset cache produced by `prepare`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// TOML config file mirroring the training hyperparameters.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override single config keys, e.g. `--set tau=0.5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Comma-separated seeds; each seed is one full run.
        #[arg(long, default_value = "42")]
        seeds: String,
        /// Ablation switch: one of no_cons, no_rand, no_ac, no_adv.
        #[arg(long)]
        ablate: Option<String>,
        /// Resume each run from its checkpoint if present.
        #[arg(long)]
        resume: bool,
        /// Also export final and raw embeddings per run.
        #[arg(long)]
        export_embeddings: bool,
        /// Audit perturbation constraints every batch (projection bound,
        /// eta bound, signed-step optimality); violations exit 3.
        #[arg(long)]
        audit: bool,
    },
    /// Rank the held-out split from a checkpoint.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Comma-separated cutoffs.
        #[arg(long, default_value = "10,20,50")]
        ks: String,
        /// `valid` or `test`.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Five-group user/item decomposition of test performance.
    GroupEval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
    /// Boundary-margin distribution diagnostic.
    Margins {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Users to sample.
        #[arg(long, default_value_t = 500)]
        sample: usize,
        /// Positive/negative candidates per user.
        #[arg(long, default_value_t = 5)]
        pairs: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Write final and raw embeddings as tab-separated text.
    ExportEmbeddings {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Output path prefix.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full model plus the four ablation variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value = "42")]
        seeds: String,
    },
    /// Cartesian-product hyperparameter sweep; resumable.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with a `[grid]` table of key -> list of values.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare {
            input,
            output,
            schema,
            delimiter,
            threshold,
            min_count,
            ratios,
            seed,
        } => commands::prepare(
            &input, &output, &schema, delimiter.as_deref(), threshold, min_count, &ratios, seed,
        ),
        Command::Train {
            data,
            out,
            config,
            sets,
            seeds,
            ablate,
            resume,
            export_embeddings,
            audit,
        } => commands::train(
            &data,
            &out,
            config.as_deref(),
            &sets,
            &seeds,
            ablate.as_deref(),
            resume,
            export_embeddings,
            audit,
        ),
        Command::Evaluate {
            data,
            checkpoint,
            config,
            sets,
            ks,
            split,
        } => commands::evaluate(&data, &checkpoint, config.as_deref(), &sets, &ks, &split),
        Command::GroupEval {
            data,
            checkpoint,
            config,
            sets,
            k,
        } => commands::group_eval(&data, &checkpoint, config.as_deref(), &sets, k),
        Command::Margins {
            data,
            checkpoint,
            config,
            sets,
            sample,
            pairs,
            seed,
        } => commands::margins(&data, &checkpoint, config.as_deref(), &sets, sample, pairs, seed),
        Command::ExportEmbeddings {
            data,
            checkpoint,
            config,
            sets,
            out,
        } => commands::export_embeddings(&data, &checkpoint, config.as_deref(), &sets, &out),
        Command::Ablate {
            data,
            out,
            config,
            sets,
            seeds,
        } => commands::ablate(&data, &out, config.as_deref(), &sets, &seeds),
        Command::Sweep {
            data,
            out,
            grid,
            config,
            sets,
        } => commands::sweep(&data, &out, &grid, config.as_deref(), &sets),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}
