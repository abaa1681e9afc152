use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spkanon::attacks::AttackMethod;
use spkanon::evaluation::Protocol;

mod commands;
mod config;

use config::Preset;

/// Speaker anonymization by adversarial perturbation.
#[derive(Debug, Parser)]
#[command(name = "spkanon", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML file overriding preset defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; must be new or empty.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true)]
    pub device: Option<String>,
    /// Default sizes and schedules.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Train without the batch-mean term.
    NoBm,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the toy corpus used for desk-scale experiments.
    MakeToyCorpus {
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        utterances: Option<usize>,
        #[arg(long)]
        seconds: Option<f64>,
    },
    /// Train the reference speaker encoder and report its held-out EER.
    TrainEncoder {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the perturbation generator against a frozen encoder.
    TrainGenerator {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        ablation: Option<Ablation>,
        /// Continue from a training checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Anonymize every file of a manifest.
    Anonymize {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run an FGSM-family attack on every file of a manifest.
    Attack {
        #[arg(long)]
        method: AttackMethod,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score a trial list and report the EER.
    Evaluate {
        #[arg(long)]
        protocol: Protocol,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
        /// Trial list; generated from the split when absent.
        #[arg(long)]
        trials: Option<PathBuf>,
        /// Anonymize with this generator checkpoint.
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Apply this attack, after the generator if both are given.
        #[arg(long)]
        attack: Option<AttackMethod>,
        /// Transforms such as `median-smooth:3`, applied in order before scoring.
        #[arg(long = "transform")]
        transforms: Vec<String>,
    },
    /// Write a balanced trial list for a manifest.
    MakeTrials {
        #[arg(long)]
        protocol: Protocol,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
    },
    /// Apply a transform chain to every file of a manifest.
    Transform {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "transform", required = true)]
        transforms: Vec<String>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    use commands::*;
    let g = &cli.global;
    match cli.command {
        Command::MakeToyCorpus { speakers, utterances, seconds } => make_toy_corpus(g, speakers, utterances, seconds),
        Command::TrainEncoder { manifest, steps } => train_encoder(g, &manifest, steps),
        Command::TrainGenerator { encoder, manifest, ablation, resume, steps } => {
            train_generator(g, &encoder, &manifest, ablation, resume.as_deref(), steps)
        }
        Command::Anonymize { generator, manifest } => anonymize(g, &generator, &manifest),
        Command::Attack { method, encoder, manifest } => attack(g, method, &encoder, &manifest),
        Command::Evaluate { protocol, encoder, manifest, split, trials, generator, attack, transforms } => evaluate(
            g,
            EvaluateArgs {
                protocol,
                encoder,
                manifest,
                split,
                trials,
                generator,
                attack,
                transforms,
            },
        ),
        Command::MakeTrials { protocol, manifest, split } => make_trials(g, protocol, &manifest, split),
        Command::Transform { manifest, transforms } => transform(g, &manifest, &transforms),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
