mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use manifest::RunRecord;

#[derive(Debug, Parser)]
#[command(name = "zoomshift", version, about = "Zoom-level annotation shift experiments on lesion patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic mammogram dataset with lesion masks.
    MakePhantom(MakePhantomArgs),
    /// Extract G1/G2/G3 lesion patches and healthy patches from a manifest.
    ExtractPatches(ExtractArgs),
    /// Train a SinGAN on one patch from a patch cache.
    TrainSingan(TrainSinganArgs),
    /// Draw samples from a trained SinGAN.
    SampleSingan(SampleSinganArgs),
    /// SiFID between a real image and one or more generated images.
    Sifid(SifidArgs),
    /// Train and evaluate one classifier head on a patch cache.
    TrainClassifier(TrainClassifierArgs),
    /// Run (or resume) an experiment grid.
    RunExperiment(RunExperimentArgs),
    /// Rebuild results.csv and plots from the cell reports of a grid run.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct MakePhantomArgs {
    /// Number of patients.
    #[arg(long = "n", default_value_t = 20)]
    pub n_patients: usize,
    /// Probability that an image carries a lesion.
    #[arg(long, default_value_t = 0.5)]
    pub prevalence: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Phantom generator settings (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Dataset manifest CSV.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Zoom groups to keep, e.g. `G1,G2,G3`.
    #[arg(long, default_value = "G1,G2,G3")]
    pub groups: String,
    /// Healthy patch settings (TOML with `healthy_per_image`, `healthy_threshold`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub healthy_per_image: Option<usize>,
    /// Seed for healthy patch placement.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainSinganArgs {
    /// Patch cache directory written by `extract-patches`.
    #[arg(long)]
    pub patches: PathBuf,
    #[arg(long)]
    pub patch_id: String,
    #[arg(long)]
    pub out: PathBuf,
    /// SinGAN settings (TOML); flags below take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub iterations_per_epoch: Option<usize>,
    /// Train on patches from any zoom group, not only G1.
    #[arg(long)]
    pub allow_any_group: bool,
    /// Samples drawn for the SiFID check after training.
    #[arg(long, default_value_t = 10)]
    pub check_samples: usize,
}

#[derive(Debug, Args)]
pub struct SampleSinganArgs {
    /// Checkpoint directory written by `train-singan`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Resize samples to this square side and min-max normalize them, as for augmentation.
    #[arg(long)]
    pub resize: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SifidArgs {
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub fake: Vec<PathBuf>,
    /// Backbone settings (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Optional CSV with one row per generated image.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainClassifierArgs {
    #[arg(long)]
    pub patches: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Classifier settings (TOML with `train`, `backbone` and split fields).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "G1,G2,G3")]
    pub train_groups: String,
    /// Defaults to the training groups.
    #[arg(long)]
    pub test_groups: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Healthy vs lesion instead of healthy/benign/malignant.
    #[arg(long)]
    pub binary: bool,
}

#[derive(Debug, Args)]
pub struct RunExperimentArgs {
    /// Grid configuration (TOML).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in grid: `shift`, `augmentation` or `comparison`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Replace every cell's seed list with this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after computing this many new cells.
    #[arg(long)]
    pub max_new_cells: Option<usize>,
    /// Cache root for trained SinGANs.
    #[arg(long, env = "ZOOMSHIFT_CACHE")]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory of `run-experiment`.
    #[arg(long)]
    pub dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let started = Instant::now();
    let mut record = RunRecord::default();
    let (name, result) = match &cli.command {
        Command::MakePhantom(a) => ("make-phantom", commands::make_phantom(a, &mut record)),
        Command::ExtractPatches(a) => ("extract-patches", commands::extract_patches(a, &mut record)),
        Command::TrainSingan(a) => ("train-singan", commands::train_singan(a, &mut record)),
        Command::SampleSingan(a) => ("sample-singan", commands::sample_singan(a, &mut record)),
        Command::Sifid(a) => ("sifid", commands::sifid(a, &mut record)),
        Command::TrainClassifier(a) => ("train-classifier", commands::train_classifier(a, &mut record)),
        Command::RunExperiment(a) => ("run-experiment", commands::run_experiment(a, &mut record)),
        Command::Report(a) => ("report", commands::report(a, &mut record)),
    };
    if let Err(e) = manifest::finish(name, started, record, &result) {
        eprintln!("warning: could not write run manifest: {e:#}");
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
