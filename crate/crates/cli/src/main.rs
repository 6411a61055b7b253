//! `xview`: generate synthetic cross-view data, train, evaluate and inspect
//! routing.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use xview_core::detector::Mode;

mod commands;
mod config;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "xview", version, about = "Cross-view detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; library defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Emit only this report format (default: both).
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Views {
    All,
    Ground,
    Aerial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RoutingSplit {
    Train,
    Val,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic paired dataset (COCO JSON per split plus manifest).
    Generate {
        #[command(flatten)]
        common: Common,
        /// Master seed; overrides `master_seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Total number of pairs, split 8:1:3 across train/val/test.
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Train one model and evaluate the selected checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the validation or test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
        #[arg(long, value_enum, default_value = "all")]
        views: Views,
    },
    /// Train once per seed and aggregate test metrics.
    SweepSeeds {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Per-sample routing weights and their correlation with object count.
    AnalyzeRouting {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Trained checkpoint with pathway parameters.
        #[arg(long, required_unless_present = "untrained", conflicts_with = "untrained")]
        checkpoint: Option<PathBuf>,
        /// Analyze a freshly initialized model with zeroed routing layers.
        #[arg(long)]
        untrained: bool,
        /// Initialization seed for `--untrained`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "val")]
        split: RoutingSplit,
    },
    /// Tabulate the paired-sampling probability over training steps.
    Schedule {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        t1: f64,
        #[arg(long)]
        t2: f64,
        #[arg(long)]
        steps: u64,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: xview_core::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let args: Vec<String> = std::env::args().skip(1).collect();
    let result = match cli.command {
        Command::Generate { common, seed, pairs } => commands::generate(&common, args, seed, pairs),
        Command::Train {
            common,
            data,
            mode,
            seed,
            epochs,
        } => commands::train(&common, args, &data, mode, seed, epochs),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            views,
        } => commands::eval(&common, args, &checkpoint, &data, split, views),
        Command::SweepSeeds {
            common,
            data,
            seeds,
            mode,
            epochs,
        } => commands::sweep_seeds(&common, args, &data, &seeds, mode, epochs),
        Command::AnalyzeRouting {
            common,
            data,
            checkpoint,
            untrained,
            seed,
            split,
        } => commands::analyze_routing(&common, args, &data, checkpoint.as_deref(), untrained, seed, split),
        Command::Schedule { common, t1, t2, steps } => commands::schedule(&common, args, t1, t2, steps),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
