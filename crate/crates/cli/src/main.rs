//! `trimlab` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use trimlab::checkpoint::CheckpointError;
use trimlab::config::{ConfigError, Precision, RunConfig};
use trimlab::masking::MaskingError;
use trimlab::nn::ModelError;
use trimlab::training::TrainError;
use trimlab::TensorError;

#[derive(Debug, Parser)]
#[command(name = "trimlab", version, about = "Mask training, structured trimming and cost benchmarks for toy audio encoders")]
struct Cli {
    /// JSON run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    /// Worker threads for data generation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for trimlab::data::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Self::Train,
            SplitArg::Val => Self::Val,
            SplitArg::Test => Self::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Masked-frame pretraining of the encoder.
    Pretrain,
    /// Train a probing head on a frozen encoder.
    Probe {
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Train a probing head together with unit masks.
    MaskTrain {
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Train a probing head together with per-site scale and shift.
    Ssf {
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Train a network shaped like a trimmed model from random initialization.
    Scratch {
        /// `trim_plan.json` written by `trim`.
        #[arg(long)]
        plan: PathBuf,
    },
    /// Remove masked units and verify the result against the masked model.
    Trim {
        #[arg(long)]
        masked: PathBuf,
        /// Test clips used for the equivalence check.
        #[arg(long, default_value_t = 100)]
        probes: usize,
    },
    /// Mask training over the configured t grid.
    Sweep {
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Size, MACs and latency of a base and a trimmed checkpoint.
    Bench {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        trimmed: PathBuf,
    },
    /// Task metric of a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Write synthetic clips as 16-bit WAV files.
    ExportWav {
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
}

/// The equivalence check after surgery exceeded its tolerance.
#[derive(Debug, thiserror::Error)]
#[error("trimmed model deviates from the masked model by {deviation:e} (tolerance {tolerance:e})")]
pub struct VerificationFailed {
    pub deviation: f64,
    pub tolerance: f64,
}

fn tensor_non_finite(e: &TensorError) -> bool {
    matches!(e, TensorError::NonFinite { .. })
}

fn model_non_finite(e: &ModelError) -> bool {
    matches!(e, ModelError::Tensor(t) if tensor_non_finite(t))
}

fn masking_non_finite(e: &MaskingError) -> bool {
    match e {
        MaskingError::NonFinite(_) => true,
        MaskingError::Tensor(t) => tensor_non_finite(t),
        _ => false,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<VerificationFailed>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            match e {
                TrainError::Config(_) => return 2,
                TrainError::NonFinite { .. } => return 4,
                TrainError::Tensor(t) if tensor_non_finite(t) => return 4,
                TrainError::Model(m) if model_non_finite(m) => return 4,
                TrainError::Masking(m) if masking_non_finite(m) => return 4,
                _ => {}
            }
        }
        if cause.downcast_ref::<MaskingError>().is_some_and(masking_non_finite)
            || cause.downcast_ref::<ModelError>().is_some_and(model_non_finite)
            || cause.downcast_ref::<TensorError>().is_some_and(tensor_non_finite)
        {
            return 4;
        }
        if let Some(CheckpointError::Model(_)) = cause.downcast_ref::<CheckpointError>() {
            return 2;
        }
    }
    1
}

fn resolve(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    if let Some(p) = cli.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = resolve(&cli).map_err(anyhow::Error::from).and_then(|cfg| match cfg.precision {
        Precision::F32 => commands::run::<f32>(cfg, &cli.command),
        Precision::F64 => commands::run::<f64>(cfg, &cli.command),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
