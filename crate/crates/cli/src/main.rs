//! `lexpert`: corpus generation, training, few-shot generation, evaluation,
//! CAM export and allocation debugging from one binary.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable naming the directory under which outputs go when
/// `--out` is not given.
pub const OUT_ROOT_ENV: &str = "LEXPERT_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "lexpert", version, about = "Few-shot glyph generation with localized experts")]
struct Cli {
    /// Default root for outputs of commands run without `--out`.
    #[arg(long, global = true, env = OUT_ROOT_ENV, default_value = "lexpert-out")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic component-structured glyph corpus.
    GenData(GenDataArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Render source glyphs in the style of a few reference glyphs.
    Generate(GenerateArgs),
    /// Score a checkpoint on unseen styles (accuracies and FIDs, as CSV).
    Eval(EvalArgs),
    /// Write per-expert CAM-variance heatmaps.
    Cam(CamArgs),
    /// Solve the expert/component allocation for a prediction matrix.
    Alloc(AllocArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Number of components V.
    #[arg(long, default_value_t = 10)]
    pub components: usize,
    /// Number of styles S.
    #[arg(long, default_value_t = 16)]
    pub styles: usize,
    /// Number of characters N.
    #[arg(long, default_value_t = 200)]
    pub chars: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Glyph side length in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Components (highest ids) kept out of training characters.
    #[arg(long, default_value_t = 2)]
    pub reserved: usize,
    /// Output directory [default: <out-root>/data].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML training configuration (see `--dump-config`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset applied before the config file.
    #[arg(long)]
    pub profile: Option<String>,
    /// Corpus directory written by `gen-data` [default: <out-root>/data].
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Run directory [default: <out-root>/run].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the number of training steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Print the fully resolved configuration as TOML and exit.
    #[arg(long)]
    pub dump_config: bool,
    /// List the available profiles and exit.
    #[arg(long)]
    pub list_profiles: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Directory of PGM reference glyphs, all in one style.
    #[arg(long)]
    pub refs: PathBuf,
    /// Directory of PGM source glyphs giving the characters to render.
    #[arg(long)]
    pub sources: PathBuf,
    /// Output directory [default: <out-root>/generated].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_parser = ["indomain", "transfer"])]
    pub split: String,
    /// Corpus the checkpoint was trained on [default: <out-root>/data].
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Repetitions with different reference glyphs.
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Reference glyphs per unseen style.
    #[arg(long, default_value_t = 4)]
    pub refs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training epochs of the evaluation classifiers.
    #[arg(long)]
    pub classifier_epochs: Option<usize>,
    /// Also write the CSV (and a JSON record next to it) to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CamArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Corpus the checkpoint was trained on [default: <out-root>/data].
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Glyphs (training styles × held-out characters) the variance runs over.
    #[arg(long, default_value_t = 128)]
    pub samples: usize,
    #[arg(long, default_value = "flow")]
    pub solver: String,
    /// Output directory [default: <out-root>/cam].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AllocArgs {
    /// Prediction matrix: JSON rows or whitespace/comma separated lines.
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long, default_value = "flow")]
    pub solver: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap prints usage and exits with status 2 on bad arguments
    let cli = Cli::parse();
    let root = cli.out_root;
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a, &root),
        Command::Train(a) => commands::train(a, &root),
        Command::Generate(a) => commands::generate(a, &root),
        Command::Eval(a) => commands::eval(a, &root),
        Command::Cam(a) => commands::cam(a, &root),
        Command::Alloc(a) => commands::alloc(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", commands::error_kind(&e), e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
