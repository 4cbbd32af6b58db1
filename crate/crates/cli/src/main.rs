mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use falcon_core::ErrorClass;

#[derive(Debug, Parser)]
#[command(name = "falcon", version, about = "Few-shot cross-domain segmentation with boundary-aware fine-tuning")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file layered over the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set meta.episodes_or_epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed for every stage; takes precedence over the config file.
    #[arg(long, env = "FALCON_SEED", global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source dataset or target cohort.
    Synth {
        #[arg(long, value_enum)]
        domain: Domain,
        #[arg(long)]
        out: PathBuf,
        /// Total target patients; validation and test counts come from the
        /// config and the rest are training patients.
        #[arg(long)]
        patients: Option<usize>,
        /// Slices per target patient.
        #[arg(long)]
        slices: Option<usize>,
        /// Fraction of labeled slices per target patient, in (0, 1).
        #[arg(long, value_parser = parse_fraction)]
        labeled_fraction: Option<f64>,
        /// Source classes.
        #[arg(long)]
        classes: Option<usize>,
        /// Samples per source class.
        #[arg(long)]
        samples_per_class: Option<usize>,
        /// Image side length; defaults to the network input size.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Meta-train on a source dataset.
    Train {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a meta-trained checkpoint on a target cohort.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Meta-training checkpoint to start from.
        #[arg(long, required_unless_present = "resume")]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue an interrupted fine-tuning run.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
    },
    /// Segment every slice of the chosen split with a trained checkpoint.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Evaluate a checkpoint on test tasks against sealed ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted mask raster with a ground-truth raster.
    EvalMasks {
        pred: PathBuf,
        gt: PathBuf,
        /// Average the two directed HD95 values instead of taking the max.
        #[arg(long)]
        mean_symmetry: bool,
    },
    /// Run the ablation suite on synthetic data.
    Ablate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a markdown report from a run directory.
    Report {
        /// Directory holding outputs of train, finetune, eval or ablate.
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not in (0, 1)"))
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<falcon_core::Error>().map(|e| e.class()) {
        Some(ErrorClass::Data) => 3,
        Some(ErrorClass::Config) => 4,
        _ => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
