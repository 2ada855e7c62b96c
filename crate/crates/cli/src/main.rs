//! `bihl`: train, propose, evaluate and stress-test binarized HL object proposals.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bihl", version, about = "Binarized horizontal high-frequency object proposals")]
struct Cli {
    /// Worker threads (defaults to available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model from annotated images.
    Train(TrainArgs),
    /// Write proposals for one image or a directory of images.
    Propose(ProposeArgs),
    /// Detection rate, MABO and timing against ground truth.
    Eval(EvalArgs),
    /// Repeatability under perturbations.
    Repeat(RepeatArgs),
    /// Write perturbed copies of images.
    Perturb(PerturbArgs),
    /// Generate a seeded synthetic corpus with annotations.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
pub struct PipelineArgs {
    /// Proposals kept per image.
    #[arg(long, visible_alias = "max", default_value_t = 10_000)]
    budget: usize,
    /// Skip the seed-growing merge.
    #[arg(long)]
    no_merge: bool,
    /// Rank gap below which neighbouring seeds fuse.
    #[arg(long, default_value_t = 25)]
    ts1: usize,
    /// Rank gap below which a colliding proposal fuses instead of being dropped.
    #[arg(long, default_value_t = 25)]
    ts2: usize,
    /// Minimum raw window score.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    tc: f64,
    /// Minimum largest HL value inside a window.
    #[arg(long, default_value_t = 8)]
    tmval: u8,
    /// NMS overlap above which a box is suppressed.
    #[arg(long, default_value_t = 0.875)]
    nms: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    images: PathBuf,
    /// VOC XML directory or `image_path,label,x,y,w,h` file.
    #[arg(long)]
    annotations: PathBuf,
    /// Output model file.
    #[arg(long, alias = "out")]
    model: PathBuf,
    #[arg(long, default_value_t = 4)]
    ng: usize,
    #[arg(long, default_value_t = 2)]
    na: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Random negative windows per image.
    #[arg(long, default_value_t = 50)]
    negatives: usize,
    /// Fit per-scale score calibration after training.
    #[arg(long)]
    calibrate: bool,
}

#[derive(Args, Debug)]
pub struct ProposeArgs {
    #[arg(long)]
    model: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    images: PathBuf,
    /// CSV output (`-` for stdout).
    #[arg(long, default_value = "-")]
    out: PathBuf,
    /// Also write one JSON object per proposal to this file.
    #[arg(long)]
    jsonl: Option<PathBuf>,
    /// Override the model's bit-plane count.
    #[arg(long)]
    ng: Option<usize>,
    /// Override the model's basis size.
    #[arg(long)]
    na: Option<usize>,
    /// Directory for per-scale HL maps as PGM.
    #[arg(long)]
    dump_features: Option<PathBuf>,
    /// Directory for per-scale merge occupancy grids as PGM.
    #[arg(long)]
    dump_grid: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Score this proposal CSV.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    proposals: Option<PathBuf>,
    /// Propose with this model (and time it).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Report directory; receives eval.json and eval.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
pub struct RepeatArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    images: PathBuf,
    /// Report directory; receives repeat.json and repeat.csv.
    #[arg(long)]
    out: PathBuf,
    /// Perturbation families (default: all).
    #[arg(long)]
    kind: Vec<String>,
    /// Ladder steps, 0-based (default: all).
    #[arg(long)]
    level: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
pub struct PerturbArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    kind: String,
    /// Ladder step, 0-based.
    #[arg(long)]
    level: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failure with its exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, paths or configuration, found before any work starts.
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<bihl::Error> for Failure {
    fn from(e: bihl::Error) -> Self {
        match e {
            bihl::Error::InvalidConfig(_) | bihl::Error::UnsupportedLevel(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = match cli.threads {
        Some(0) => return Err(Failure::Usage("--threads must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Runtime(e.into()))?;
    pool.install(|| match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Propose(a) => commands::propose(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Repeat(a) => commands::repeat(&a),
        Command::Perturb(a) => commands::perturb(&a),
        Command::Synth(a) => commands::synth(&a),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
