//! `adi`: batch front end for feature extraction, training, cohort building,
//! evaluation and classification.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use adi_core::config::CONFIG_ENV;
use adi_core::model::Architecture;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "adi", version, about = "Spoken dialect identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArg {
    /// JSON run configuration; built-in defaults when absent.
    #[arg(long, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic formant corpus with train/test manifests.
    Synth(SynthArgs),
    /// Write augmented copies of every utterance and a manifest listing them.
    Augment(AugmentArgs),
    /// Compute one ADIF feature file per manifest entry.
    ExtractFeatures(ExtractArgs),
    /// Train a classifier and write its checkpoint.
    Train(TrainArgs),
    /// Store per-class cohort embeddings for a trained checkpoint.
    BuildCohorts(CohortArgs),
    /// Score a labelled manifest and print the report.
    Evaluate(ScoreArgs),
    /// Print one decision line per utterance.
    Classify(ScoreArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 80)]
    pub per_class: usize,
    /// Utterances per class held out for test.tsv.
    #[arg(long, default_value_t = 20)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 2.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Directory of noise WAVs, required when noise augmentation is enabled.
    #[arg(long)]
    pub noise_dir: Option<PathBuf>,
    /// Directory of impulse-response WAVs, required when enabled.
    #[arg(long)]
    pub rir_dir: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeatureType {
    Mfcc,
    /// Produced by the external exporter; listed so the error is explicit.
    Pretrained,
    /// Deterministic 1024-dim stand-in for exporter output.
    PseudoPretrained,
}

#[derive(Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long = "type", value_enum, default_value_t = FeatureType::Mfcc)]
    pub kind: FeatureType,
    /// Rewrite files that already exist.
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ArchArg {
    Resnet34,
    Ecapa,
}

impl From<ArchArg> for Architecture {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Resnet34 => Architecture::ResNet34,
            ArchArg::Ecapa => Architecture::Ecapa,
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub features_dir: PathBuf,
    #[arg(long, value_enum)]
    pub arch: ArchArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint of the same architecture.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides the configured training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Args)]
pub struct CohortArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub features_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
    pub cohorts: Vec<PathBuf>,
    /// One feature directory per checkpoint.
    #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
    pub features_dirs: Vec<PathBuf>,
    /// One weight per checkpoint, summing to 1; equal weights by default.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub fusion_weights: Option<Vec<f64>>,
    /// Also write per-utterance score lines here.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Augment(a) => commands::augment(a),
        Command::ExtractFeatures(a) => commands::extract_features(a),
        Command::Train(a) => commands::train(a),
        Command::BuildCohorts(a) => commands::build_cohorts(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Classify(a) => commands::classify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.is::<commands::UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
