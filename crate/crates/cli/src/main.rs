//! `vesselseg`: dataset statistics, preprocessing, augmentation, training,
//! inference and evaluation for retinal vessel segmentation.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vesselseg::imaging::{AugmentSpec, ClaheConfig};
use vesselseg::metrics::{Aggregation, EvalOptions, RocMode};

use crate::error::{exit, CliError};

#[derive(Parser)]
#[command(name = "vesselseg", version, about = "Retinal vessel segmentation with a U-Net trained from scratch")]
struct Cli {
    /// Worker threads; 0 uses every core. 1 also writes wall_seconds as 0
    /// so that training logs are byte-identical across runs.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RocModeArg {
    Continuous,
    Binary,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Pooled,
    PerImageMean,
}

#[derive(Subcommand)]
enum Command {
    /// Mean image and mask, intensity histogram, pairwise correlations.
    Stats {
        /// Dataset root with images/ and masks/.
        data_root: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Grayscale, CLAHE, resize; writes a dataset root of 8-bit PGMs.
    Preprocess {
        /// Dataset root with images/ and masks/.
        data_root: PathBuf,
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
        /// Skip contrast-limited adaptive histogram equalization.
        #[arg(long)]
        no_clahe: bool,
        /// Output side length in pixels; 0 keeps the native size.
        #[arg(long, default_value_t = 512)]
        size: usize,
        /// CLAHE tiles along each axis.
        #[arg(long, default_value_t = 8)]
        tiles: usize,
        /// CLAHE clip limit as a multiple of the uniform bin height.
        #[arg(long, default_value_t = 2.0)]
        clip_factor: f64,
    },
    /// Identity, flips and a seeded rotation per source, with a provenance manifest.
    Augment {
        /// Dataset root with images/ and masks/.
        dir: PathBuf,
        /// Output directory for images/, masks/ and augment_manifest.csv.
        #[arg(long)]
        out: PathBuf,
        /// Base seed; source i draws its rotation from seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Rotation angles are drawn from [-range, range] degrees.
        #[arg(long, default_value_t = 30.0)]
        rotation_range: f64,
    },
    /// Train from a TOML run configuration.
    Train {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints, train_log.csv, split.csv and run_config.toml.
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one image; the input is resized to the checkpoint's training size.
    Predict {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// PGM or PPM input image.
        #[arg(long)]
        image: PathBuf,
        /// Binary mask PGM, at the input image's size.
        #[arg(long)]
        out: PathBuf,
        /// Also write the probability map as PGM, value round(255 p).
        #[arg(long)]
        prob: Option<PathBuf>,
        /// Probability at or above which a pixel counts as vessel.
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        /// Run configuration whose CLAHE settings to apply; without it no CLAHE is applied.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Metrics, ROC and loss plots for a checkpoint on a dataset.
    Evaluate {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root with images/ and masks/.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for metrics.csv, per_image.csv, roc.csv, roc.svg and loss.svg.
        #[arg(long)]
        out: PathBuf,
        /// Probability at or above which a pixel counts as vessel.
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        /// Binary scores the 0.5-thresholded mask; continuous sweeps 256 thresholds.
        #[arg(long, value_enum, default_value_t = RocModeArg::Binary)]
        roc_mode: RocModeArg,
        /// Pooled sums counts over images; per-image-mean averages per-image metrics.
        #[arg(long, value_enum, default_value_t = AggregationArg::Pooled)]
        aggregation: AggregationArg,
        /// Run configuration whose CLAHE settings to apply; without it no CLAHE is applied.
        #[arg(long)]
        config: Option<PathBuf>,
        /// split.csv from `train`; restricts evaluation to its test ids.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Training log for loss.svg [default: train_log.csv beside the checkpoint, if present]
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and a small U-Net.
    Gradcheck {
        /// Seed for the random probe inputs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start {} worker threads: {e}", cli.threads)))?;
    match cli.command {
        Command::Stats { data_root, out } => commands::stats(&data_root, &out),
        Command::Preprocess { data_root, out, no_clahe, size, tiles, clip_factor } => {
            let clahe = (!no_clahe).then_some(ClaheConfig { tiles_x: tiles, tiles_y: tiles, clip_factor });
            commands::preprocess(&data_root, &out, &commands::PreprocessArgs { clahe, size })
        }
        Command::Augment { dir, out, seed, rotation_range } => {
            let spec = AugmentSpec { seed, rotation_range, ..AugmentSpec::default() };
            commands::augment(&dir, &out, &spec)
        }
        Command::Train { config, out } => commands::train(&config, &out, cli.threads != 1),
        Command::Predict { checkpoint, image, out, prob, threshold, config } => {
            commands::predict(&commands::PredictArgs {
                checkpoint: &checkpoint,
                image: &image,
                out: &out,
                prob: prob.as_deref(),
                threshold,
                config: config.as_deref(),
            })
        }
        Command::Evaluate { checkpoint, data, out, threshold, roc_mode, aggregation, config, split, log } => {
            let mode = match roc_mode {
                RocModeArg::Continuous => RocMode::Continuous,
                RocModeArg::Binary => RocMode::Binary,
            };
            let aggregation = match aggregation {
                AggregationArg::Pooled => Aggregation::Pooled,
                AggregationArg::PerImageMean => Aggregation::PerImageMean,
            };
            commands::evaluate(&commands::EvaluateArgs {
                checkpoint: &checkpoint,
                data: &data,
                out: &out,
                options: EvalOptions { threshold, aggregation, roc: commands::roc_options(mode) },
                config: config.as_deref(),
                split: split.as_deref(),
                log,
            })
        }
        Command::Gradcheck { seed } => commands::gradcheck(seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
