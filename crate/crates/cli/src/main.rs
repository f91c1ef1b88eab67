mod commands;
mod settings;
mod svg;

use clap::{Args, Parser, Subcommand};
use commands::{CheckpointArgs, Common, EvalArgs, PlotArgs, PlotKind, PredictArgs, Split, SynthArgs, TrainArgs};
use cool::error::Error;
use cool::Component;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cool", version, about = "Spatio-temporal graph traffic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonFlags {
    /// Config file (TOML); a manifest from an earlier run also works.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set d=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,
}

impl CommonFlags {
    fn common(&self) -> Common {
        Common { config: self.config.clone(), set: self.set.clone(), out: self.out.clone() }
    }
}

#[derive(Args, Clone)]
struct DataFlags {
    /// Readings file (text or binary); overrides the config.
    #[arg(long)]
    readings: Option<String>,
    /// Adjacency file; overrides the config.
    #[arg(long)]
    adjacency: Option<String>,
}

#[derive(Args, Clone)]
struct CheckpointFlags {
    /// Checkpoint written by `cool train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    #[arg(long, value_enum)]
    split: Option<Split>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        days: Option<usize>,
        /// Write readings in the binary format.
        #[arg(long)]
        binary: bool,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Train a model.
    Train {
        /// Base settings: `default` or `tiny`.
        #[arg(long)]
        profile: Option<String>,
        /// Disable a component. Repeatable.
        #[arg(long, value_parser = parse_component)]
        ablate: Vec<Component>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a `last.ckpt`.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Evaluate a checkpoint and the historical-average baseline.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointFlags,
        /// `3,6,12` or `1..12`.
        #[arg(long)]
        horizons: Option<String>,
        /// Also write predictions.csv.
        #[arg(long)]
        save_predictions: bool,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Write denormalized forecasts for a split.
    Predict {
        #[command(flatten)]
        ckpt: CheckpointFlags,
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Render a figure with a numeric sidecar.
    Plot {
        #[arg(value_enum)]
        kind: PlotKind,
        #[command(flatten)]
        ckpt: CheckpointFlags,
        /// Sensor id (defaults to the first sensor).
        #[arg(long)]
        node: Option<String>,
        #[arg(long, default_value_t = 1)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        feature: usize,
        /// Window index within the split (attention plot).
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Number of windows (prediction and affinity plots).
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        common: CommonFlags,
    },
}

fn parse_component(s: &str) -> Result<Component, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn checkpoint_args(ckpt: CheckpointFlags, common: &CommonFlags) -> CheckpointArgs {
    CheckpointArgs {
        common: common.common(),
        checkpoint: ckpt.checkpoint,
        readings: ckpt.data.readings,
        adjacency: ckpt.data.adjacency,
        split: ckpt.split,
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 4,
        Error::Io { .. } | Error::Parse { .. } | Error::Data(_) | Error::Checkpoint(_) => 3,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("COOL_NUM_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| Error::Config(format!("COOL_NUM_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    match cli.command {
        Command::Synth { seed, nodes, days, binary, common } => {
            commands::synth(&SynthArgs { common: common.common(), seed, nodes, days, binary })
        }
        Command::Train { profile, ablate, seed, epochs, resume, data, common } => commands::train(&TrainArgs {
            common: common.common(),
            profile,
            ablate,
            seed,
            epochs,
            readings: data.readings,
            adjacency: data.adjacency,
            resume,
        }),
        Command::Eval { ckpt, horizons, save_predictions, common } => {
            commands::eval(&EvalArgs { inner: checkpoint_args(ckpt, &common), horizons, save_predictions })
        }
        Command::Predict { ckpt, limit, common } => {
            commands::predict(&PredictArgs { inner: checkpoint_args(ckpt, &common), limit })
        }
        Command::Plot { kind, ckpt, node, horizon, feature, sample, limit, common } => commands::plot(&PlotArgs {
            inner: checkpoint_args(ckpt, &common),
            kind,
            node,
            horizon,
            feature,
            sample,
            limit,
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
