//! `uadbench` — drive the anomaly-segmentation benchmark: synthesize
//! phantom datasets, train the model zoo, score and post-process test
//! volumes, evaluate, and render result tables and plots.

mod config;
mod error;
mod pipeline;
mod report;

use clap::{Args, Parser, Subcommand};
use config::ExperimentConfig;
use error::CliError;
use std::path::PathBuf;
use uadbench_core::scoring::ScoreMethod;
use uadbench_core::zoo::MethodTag;

#[derive(Parser)]
#[command(
    name = "uadbench",
    version,
    about = "Benchmark unsupervised anomaly segmentation on phantom volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration file (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::load(&self.config, self.seed, self.out.as_deref())
    }
}

#[derive(Args)]
struct CellSelect {
    /// Model tag (e.g. VAE, AE_dense, fAnoGAN).
    #[arg(long)]
    method: MethodTag,
    /// Training-set fraction; must be listed in the config.
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom datasets.
    Synth(CommonArgs),
    /// Train (or load from cache) one model of the matrix.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        select: CellSelect,
    },
    /// Write raw score volumes for one (model, scorer) pair.
    Score {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        select: CellSelect,
        /// Scorer (reconstruction, mc, gradient, restoration).
        #[arg(long)]
        scorer: ScoreMethod,
    },
    /// Run one matrix cell end to end and persist its result rows.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        select: CellSelect,
    },
    /// Run the full matrix and emit the report.
    Run(CommonArgs),
    /// Re-render tables and plots from completed cells.
    Report(CommonArgs),
    /// Internal: execute one cell by index (spawned by `run`).
    #[command(hide = true)]
    Cell {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        index: usize,
    },
}

fn find_cell(cfg: &ExperimentConfig, select: &CellSelect) -> Result<config::Cell, CliError> {
    let method_idx = cfg
        .methods
        .iter()
        .position(|m| m.tag == select.method)
        .ok_or_else(|| {
            CliError::Config(format!("method {} is not in the config's matrix", select.method))
        })?;
    let fraction_idx = cfg
        .subsample_fractions
        .iter()
        .position(|&f| f == select.fraction)
        .ok_or_else(|| {
            CliError::Config(format!(
                "fraction {} is not in subsample_fractions {:?}",
                select.fraction, cfg.subsample_fractions
            ))
        })?;
    Ok(config::Cell {
        method_idx,
        fraction_idx,
    })
}

fn worker_pool_size() -> usize {
    std::env::var("UADBENCH_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(common) => {
            let cfg = common.load()?;
            let dir = pipeline::synth(&cfg)?;
            println!("phantoms ready under {}", dir.display());
        }
        Command::Train { common, select } => {
            let cfg = common.load()?;
            let cell = find_cell(&cfg, &select)?;
            let cm = pipeline::ensure_model(&cfg, cell)?;
            println!(
                "model {} ({}) — {}",
                cfg.cell_id(cell),
                cm.cache_key,
                if cm.cache_hit { "cache hit" } else { "trained" }
            );
        }
        Command::Score {
            common,
            select,
            scorer,
        } => {
            let cfg = common.load()?;
            let cell = find_cell(&cfg, &select)?;
            let dir = pipeline::score_cell(&cfg, cell, scorer)?;
            println!("score volumes under {}", dir.display());
        }
        Command::Evaluate { common, select } => {
            let cfg = common.load()?;
            let cell = find_cell(&cfg, &select)?;
            let result = pipeline::evaluate_cell(&cfg, cell)?;
            pipeline::mark_completed(&cfg, cell)?;
            for row in &result.rows {
                println!("{}", row.report.csv_row());
            }
        }
        Command::Run(common) => {
            let cfg = common.load()?;
            let forward = pipeline::ForwardArgs {
                config: common.config.clone(),
                seed: common.seed,
                out: common.out.clone(),
            };
            let dir = pipeline::run_with_workers(&cfg, &forward, worker_pool_size())?;
            println!("report under {}", dir.display());
        }
        Command::Report(common) => {
            let cfg = common.load()?;
            let dir = report::emit(&cfg)?;
            println!("report under {}", dir.display());
        }
        Command::Cell { common, index } => {
            let cfg = common.load()?;
            let cells = cfg.cells();
            let cell = *cells.get(index).ok_or_else(|| {
                CliError::Config(format!("cell index {index} out of range 0..{}", cells.len()))
            })?;
            pipeline::evaluate_cell(&cfg, cell)?;
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = dispatch(cli) {
        eprintln!("uadbench error [category={}]: {err}", err.category());
        std::process::exit(err.exit_code());
    }
}
