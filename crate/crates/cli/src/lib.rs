//! Command-line front end: run files in, CSV and JSON artifacts out.

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use freezetune::SchedulerKind;

pub use config::RunFile;

/// Environment variable capping kernel and sweep parallelism.
pub const THREADS_ENV: &str = "FREEZETUNE_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "freezetune",
    version,
    about = "Layer-freezing fine-tuning experiments"
)]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain (optional) and fine-tune once, writing the run CSVs.
    Train,
    /// One fine-tune per scheduler and freezing rate, writing sweep.csv.
    Sweep {
        /// Comma-separated freezing rates.
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
    },
    /// Analytic activation memory for the configured model.
    MemoryReport,
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Adds a deliberately broken LayerNorm backward to the suite.
        #[arg(long, hide = true)]
        with_corrupted_fixture: bool,
    },
    /// Writes the configured synthetic task as train.csv and val.csv.
    GenData,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl From<Toggle> for bool {
    fn from(t: Toggle) -> bool {
        t == Toggle::On
    }
}

/// Flags that override run-file values.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// TOML run file; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data order and the scheduler.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Fraction of layers frozen per iteration, in [0, 1).
    #[arg(long, global = true)]
    pub freeze_rate: Option<f64>,
    /// ils, random, progressive or none.
    #[arg(long, global = true, value_parser = parse_scheduler)]
    pub scheduler: Option<SchedulerKind>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Quantized caching, for both training and the memory report.
    #[arg(long, global = true, value_enum)]
    pub quant: Option<Toggle>,
    /// Top-10% caching of frozen LayerNorm inputs.
    #[arg(long, global = true, value_enum)]
    pub prune: Option<Toggle>,
    /// Directory for CSV and JSON artifacts.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

fn parse_scheduler(s: &str) -> Result<SchedulerKind, String> {
    s.parse().map_err(|e: freezetune::Error| e.to_string())
}

impl Overrides {
    /// Loads the run file (or defaults) and applies the flags.
    pub fn resolve(&self) -> Result<RunFile> {
        let mut run = match &self.config {
            Some(path) => RunFile::load(path)?,
            None => RunFile::default(),
        };
        let t = &mut run.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.freeze_rate {
            t.freeze_rate = v;
        }
        if let Some(v) = self.scheduler {
            t.scheduler = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.quant {
            t.quant = v.into();
            run.memory.quant = v.into();
        }
        if let Some(v) = self.prune {
            t.prune = v.into();
            run.memory.prune = v.into();
        }
        if let Some(v) = &self.out_dir {
            run.output.dir = v.clone();
        }
        Ok(run)
    }
}

/// Sizes the global thread pool from [`THREADS_ENV`] when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .with_context(|| format!("{THREADS_ENV} must be a thread count, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool already initialized")?;
    }
    Ok(())
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<ExitCode> {
    init_threads()?;
    match cli.command {
        Command::Gradcheck {
            instances,
            with_corrupted_fixture,
        } => commands::gradcheck(instances, with_corrupted_fixture),
        command => {
            let run = cli.overrides.resolve()?;
            match command {
                Command::Train => commands::train(&run),
                Command::Sweep { rates } => commands::sweep(&run, rates),
                Command::MemoryReport => commands::memory_report(&run),
                Command::GenData => commands::gen_data(&run),
                Command::Gradcheck { .. } => unreachable!("handled above"),
            }
        }
    }
}
