//! Command-line driver: one JSON experiment config drives teacher training,
//! distillation runs, grids and diagnostics.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "vid", version, about = "Variational information distillation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Replaces the configured seed list with this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replaces the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the teacher on the full training split.
    TrainTeacher(Common),
    /// Train students for every method, size and seed.
    Distill(Common),
    /// Accuracy of a saved teacher or student.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Log-likelihood heatmaps of a distilled student.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated image indices.
        #[arg(long, value_delimiter = ',', required = true)]
        images: Vec<usize>,
    },
    /// Sorted variance spectra of a distilled student's pairs.
    Variances {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Bound-versus-oracle check on correlated Gaussians.
    MiBench(Common),
    /// Full weight grid over every seed.
    Grid(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let opts = commands::RunOptions { out: common.out.clone(), seed: common.seed, threads: common.threads };
    commands::resolve(cfg, &opts)
}

fn print<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher(c) => print(&commands::train_teacher(&load(&c)?)?),
        Command::Distill(c) => print(&commands::distill(&load(&c)?, c.threads)?.summary),
        Command::Eval { common, checkpoint } => print(&commands::eval(&load(&common)?, checkpoint.as_deref())?),
        Command::Heatmap { common, checkpoint, images } => {
            print(&commands::heatmap(&load(&common)?, &checkpoint, &images)?)
        }
        Command::Variances { common, checkpoint } => print(&commands::variances(&load(&common)?, &checkpoint)?),
        Command::MiBench(c) => print(&commands::mi_bench(&load(&c)?)?),
        Command::Grid(c) => print(&commands::grid(&load(&c)?, c.threads)?.selections),
    }
    Ok(())
}
