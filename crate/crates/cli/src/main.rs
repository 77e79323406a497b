mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{EvaluateArgs, PredictArgs, Split, SynthArgs, DEFAULT_SIZE};
use config::{parse_scheme, FileConfig};
use error::CliError;
use s2sd_core::inference::DEFAULT_ALPHA;

/// Building damage segmentation from pre/post disaster image pairs.
#[derive(Parser)]
#[command(name = "s2sd", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SIZE)]
        size: u32,
        #[arg(long, default_value_t = 6)]
        min_buildings: usize,
        #[arg(long, default_value_t = 10)]
        max_buildings: usize,
    },
    /// Render and cache target masks for every labelled scene.
    Preprocess {
        #[arg(long, env = "S2SD_DATA_ROOT")]
        data: PathBuf,
        #[arg(long, default_value = "bg5")]
        scheme: String,
        #[arg(long, default_value_t = DEFAULT_SIZE)]
        size: u32,
    },
    /// Train a model and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, env = "S2SD_DATA_ROOT")]
        data: PathBuf,
        /// JSON report path; a text table is written next to it.
        #[arg(long)]
        report: PathBuf,
        /// Fail unless the checkpoint was trained on this scheme.
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
        #[arg(long)]
        train_fraction: Option<f64>,
        /// Split seed; defaults to the training seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
    },
    /// Segment one image pair and write mask, color and overlay PNGs.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        post: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with any of the keys below; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-epoch history (JSON lines); defaults to history.jsonl beside the checkpoint.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, env = "S2SD_DATA_ROOT")]
    data: Option<PathBuf>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    image_size: Option<u32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// uniform or inverse-frequency.
    #[arg(long)]
    weight_mode: Option<String>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    no_augment: bool,
    /// Validate on the training scenes (overfit checks).
    #[arg(long)]
    val_on_train: bool,
    /// Encoder widths, e.g. 64,128,256,512.
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    use_se: bool,
    #[arg(long)]
    se_reduction: Option<usize>,
}

impl TrainArgs {
    fn file_config(self) -> Result<(FileConfig, PathBuf, Option<PathBuf>), CliError> {
        let base = match &self.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let flags = FileConfig {
            data: self.data,
            scheme: self.scheme,
            image_size: self.image_size,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            weight_mode: self.weight_mode,
            train_fraction: self.train_fraction,
            augment: self.no_augment.then_some(false),
            val_on_train: self.val_on_train.then_some(true),
            features: self.features,
            use_se: self.use_se.then_some(true),
            se_reduction: self.se_reduction,
        };
        Ok((base.merge(flags), self.out, self.history))
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth {
            out,
            scenes,
            seed,
            size,
            min_buildings,
            max_buildings,
        } => commands::synth(SynthArgs {
            out,
            scenes,
            seed,
            size,
            min_buildings,
            max_buildings,
        }),
        Command::Preprocess { data, scheme, size } => commands::preprocess(&data, parse_scheme(&scheme)?, size),
        Command::Train(args) => {
            let (cfg, out, history) = args.file_config()?;
            commands::train(cfg, &out, history)
        }
        Command::Evaluate {
            ckpt,
            data,
            report,
            scheme,
            split,
            train_fraction,
            seed,
            batch_size,
        } => commands::evaluate(EvaluateArgs {
            ckpt,
            data,
            report,
            scheme,
            split,
            train_fraction,
            seed,
            batch_size,
        }),
        Command::Predict {
            ckpt,
            pre,
            post,
            out,
            scheme,
            alpha,
        } => commands::predict(PredictArgs {
            ckpt,
            pre,
            post,
            out,
            scheme,
            alpha,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // clap reports usage errors with 2 already; help/version exit 0.
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
