mod args;
mod commands;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::Global;

#[derive(Debug, Parser)]
#[command(name = "wordbridge", version, about = "Joint audio/text word embeddings: training, decoding and experiment grids")]
struct Cli {
    /// Master seed for data generation, sampling and training
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Experiment config (TOML); flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for all outputs
    #[arg(long, short, global = true, default_value = "out")]
    output_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with known ground truth
    Synth(commands::SynthArgs),
    /// Train a model (joint, or separate plus alignment maps)
    Train(commands::TrainArgs),
    /// Fit projections and linear maps for a separately trained model
    Align(commands::AlignArgs),
    /// Decode utterances to JSON lines
    Decode(commands::DecodeArgs),
    /// Word error rate of decode output against a labelled manifest
    Score(commands::ScoreArgs),
    /// Hours × paired-words grid, with contour
    Spectrum(commands::SpectrumArgs),
    /// Drop loss terms one at a time
    Ablate(commands::AblateArgs),
    /// With and without the cycle term per paired-word count
    CycleStudy(commands::CycleArgs),
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let g = Global { seed: cli.seed, config: cli.config, output_dir: cli.output_dir };
    match &cli.command {
        Command::Synth(a) => commands::synth(&g, a),
        Command::Train(a) => commands::train(&g, a),
        Command::Align(a) => commands::align(&g, a),
        Command::Decode(a) => commands::decode(&g, a),
        Command::Score(a) => commands::score(&g, a),
        Command::Spectrum(a) => commands::spectrum(&g, a),
        Command::Ablate(a) => commands::ablate(&g, a),
        Command::CycleStudy(a) => commands::cycle_study(&g, a),
    }
}
