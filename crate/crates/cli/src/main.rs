//! `dtgi`: data generation, training, evaluation and reporting for the
//! instruction-conditioned decision transformer.

mod commands;
mod setup;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

// glibc malloc returns the tape's large buffers to the kernel after every
// step and faults them back in; mimalloc keeps them
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "dtgi", version, about = "Decision transformer conditioned on multimodal game instructions")]
pub struct Cli {
    /// TOML config layered over the built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Working directory holding data, runs and reports.
    #[arg(long, global = true, default_value = "dtgi-out", value_name = "DIR")]
    pub out: PathBuf,
    /// Master seed for gen-data, training seed otherwise.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Dotted-key override, repeatable: `--set train.lr=3e-4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the task split: offline datasets, instruction sets, embedding cache and manifest.
    GenData {
        /// Total games; unseen games keep their configured count.
        #[arg(long)]
        games: Option<usize>,
        /// Transitions per training game.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Train one checkpoint per method and seed.
    Train {
        /// Comma-separated list such as `DT,DTGI`.
        #[arg(long)]
        methods: Option<String>,
        /// Comma-separated training seeds; defaults to the single run seed.
        #[arg(long)]
        seeds: Option<String>,
        /// Continue from the last completed epoch.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs, leaving a resumable run.
        #[arg(long, hide = true)]
        stop_after_epochs: Option<usize>,
    },
    /// Raw returns of trained checkpoints on training and unseen games.
    Eval {
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Evaluate, normalise and summarise every method; `--fixtures` checks the appendix tables instead.
    Report {
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        fixtures: bool,
    },
    /// Per-instruction importance scores as CSV and an SVG heatmap.
    ImportanceDump {
        #[arg(long, default_value = "DTGI")]
        method: String,
    },
    /// Finite-difference check of every differentiable stage.
    GradCheck,
    /// Normalise the raw appendix tables and compare with the published ones.
    Oracle,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
