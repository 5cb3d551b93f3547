//! `epiforecast`: train, evaluate, ablate and forecast from the command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerical failure during training.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use epiforecast::data::NormMode;
use epiforecast::eval::PccMode;
use epiforecast::model::Variant;
use epiforecast::Error;

/// A failure with the exit code of its class.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Dimension { .. } => 2,
            Error::Ingest { .. } | Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::Numerical(_) => 4,
            Error::Autodiff(_) | Error::Internal(_) => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "epiforecast", version, about = "Regional epidemic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (or sweep a grid) and score it on the test split.
    Train(TrainArgs),
    /// Score a checkpoint on the test split of a data file.
    Evaluate(EvaluateArgs),
    /// Train and score every (variant, seed) pair.
    Ablate(AblateArgs),
    /// Forecast `h` steps past the end of a data file.
    Predict(PredictArgs),
    /// Write a synthetic coupled-sinusoid data set.
    Synth(SynthArgs),
}

/// Flags shared by `train` and `ablate`.
#[derive(Args, Clone)]
struct RunArgs {
    /// Case-count CSV: header of region labels, one row per time step.
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON config (same layout as effective-config.json; may be partial).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    /// Run seed; falls back to the config file, then EPIFORECAST_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// per-region or global min-max scaling.
    #[arg(long)]
    norm: Option<NormMode>,
    /// pooled or region-mean correlation.
    #[arg(long, value_parser = parse_pcc)]
    pcc: Option<PccMode>,
    /// Parallel training runs.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// none, no-inter, no-intra, no-ar, no-raconv or no-fusion.
    #[arg(long)]
    variant: Option<Variant>,
    /// `full` for the full sweep, or a JSON file of value lists.
    #[arg(long)]
    grid: Option<String>,
    /// Skip the persistence, AR and LRidge baselines.
    #[arg(long)]
    no_baselines: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for eval.json and results.csv; prints JSON when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also score the linear baselines refit on this data.
    #[arg(long)]
    baselines: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated variants.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "none,no-inter,no-intra,no-ar,no-raconv,no-fusion"
    )]
    variants: Vec<Variant>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Forecast from the last observed step (the default).
    #[arg(long, conflicts_with = "anchor")]
    latest: bool,
    /// Forecast from the window ending at this 0-based step instead.
    #[arg(long)]
    anchor: Option<usize>,
    /// Directory for forecast.json; prints JSON when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// CSV file to write.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 5)]
    regions: usize,
    #[arg(long, default_value_t = 500)]
    len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Observation noise standard deviation.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Extra delay per region index.
    #[arg(long, default_value_t = 1)]
    lag: usize,
    #[arg(long, default_value_t = 20.0)]
    period: f64,
}

fn parse_pcc(s: &str) -> Result<PccMode, String> {
    match s {
        "pooled" => Ok(PccMode::Pooled),
        "region-mean" => Ok(PccMode::RegionMean),
        _ => Err(format!("expected pooled or region-mean, got {s:?}")),
    }
}

impl RunArgs {
    fn overrides(&self) -> config::Overrides {
        config::Overrides {
            data: self.data.clone(),
            out: self.out.clone(),
            horizon: self.horizon,
            window: self.window,
            seed: self.seed,
            lr: self.lr,
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            norm: self.norm,
            pcc: self.pcc,
            jobs: self.jobs,
            ..Default::default()
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => {
            let mut flags = a.run.overrides();
            flags.variant = a.variant;
            flags.no_baselines = a.no_baselines;
            flags.grid = a.grid.as_deref().map(config::load_grid).transpose()?;
            commands::train(a.run.config.as_deref(), &flags)
        }
        Command::Evaluate(a) => commands::evaluate(&a.checkpoint, &a.data, a.out.as_deref(), a.baselines),
        Command::Ablate(a) => commands::ablate(a.run.config.as_deref(), &a.run.overrides(), &a.variants, &a.seeds),
        Command::Predict(a) => {
            let _ = a.latest;
            commands::predict(&a.checkpoint, &a.data, a.anchor, a.out.as_deref())
        }
        Command::Synth(a) => commands::synth(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
