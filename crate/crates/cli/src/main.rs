//! `bwla`: dataset preparation, adapter training, generation, adapter
//! tooling and the two fidelity studies.

mod commands;
mod parse;

use std::path::PathBuf;
use std::process::ExitCode;

use bwla_core::{AdapterKind, Error};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "bwla", version, about = "Block-wise low-rank adapters for a small diffusion U-Net")]
pub struct Cli {
    /// Directory that every relative path is resolved against
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Seed for every random component; overrides the config file's seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON experiment config (or a run.json written by an earlier run)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a base model, optionally pretraining it on the synthetic corpus
    InitModel(InitModelArgs),
    /// Write the synthetic identity or style instance set
    MakeDataset(MakeDatasetArgs),
    /// Generate class regularization images with the base model
    MakeReg(MakeRegArgs),
    /// Train an adapter on a dataset directory
    Train(TrainArgs),
    /// Generate images, each with a JSON sidecar
    Generate(GenerateArgs),
    /// Print an adapter's or model's metadata
    Inspect(InspectArgs),
    /// Keep only the listed blocks of an adapter
    Filter(FilterArgs),
    /// Fold an adapter into the base weights
    Merge(MergeArgs),
    /// Score adapter combinations on identity and style
    StudyCombination(StudyCombinationArgs),
    /// Train a style adapter per block group and score each with the identity adapter
    StudyBlocks(StudyBlocksArgs),
    /// Run pretraining, both adapters and the combination study end to end
    DeskExperiment(DeskArgs),
}

#[derive(Debug, Args)]
pub struct InitModelArgs {
    /// Output model file
    #[arg(long)]
    pub out: PathBuf,
    /// Pretraining steps on the synthetic corpus (0 keeps random weights)
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    /// Channel count of the first level
    #[arg(long)]
    pub base_channels: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Identity,
    Style,
}

#[derive(Debug, Args)]
pub struct MakeDatasetArgs {
    /// Which synthetic set to write
    #[arg(long, value_enum)]
    pub kind: DatasetKind,
    /// Dataset directory (instance images go to <out>/instance)
    #[arg(long)]
    pub out: PathBuf,
    /// Number of instance images
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MakeRegArgs {
    /// Base model file
    #[arg(long)]
    pub model: PathBuf,
    /// Class caption, e.g. "figure"
    #[arg(long)]
    pub caption: String,
    /// Number of images
    #[arg(long)]
    pub count: Option<usize>,
    /// Dataset directory (images go to <out>/reg)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Base model file
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory with instance/ and optional reg/
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output adapter file
    #[arg(long)]
    pub out: PathBuf,
    /// Adapter name
    #[arg(long)]
    pub name: String,
    /// Trigger token (defaults to the first token of the instance captions)
    #[arg(long)]
    pub trigger: Option<String>,
    /// Optimizer steps
    #[arg(long)]
    pub steps: Option<usize>,
    /// Learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Instance images per step
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Weight of the regularization loss
    #[arg(long)]
    pub prior_weight: Option<f64>,
    /// Instance repeats per epoch
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Rank for every adapted block
    #[arg(long)]
    pub rank: Option<usize>,
    /// lora (attention only) or locon (attention and convs)
    #[arg(long)]
    pub kind: Option<AdapterKind>,
    /// Blocks to adapt: comma-separated ids (IN0,OUT3) or group names (upper)
    #[arg(long)]
    pub blocks: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Base model file
    #[arg(long)]
    pub model: PathBuf,
    /// Prompt (defaults to the study prompt of the config)
    #[arg(long)]
    pub prompt: Option<String>,
    /// Negative prompt for the unconditional branch
    #[arg(long)]
    pub negative: Option<String>,
    /// Adapter as PATH or PATH:STRENGTH; repeatable
    #[arg(long = "adapter")]
    pub adapters: Vec<String>,
    /// Sampler steps
    #[arg(long)]
    pub steps: Option<usize>,
    /// Classifier-free guidance scale
    #[arg(long)]
    pub cfg: Option<f64>,
    /// Number of images; seeds run from the sampler seed upward
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Adapter or model file
    pub file: PathBuf,
    /// Print JSON instead of a table
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Adapter file
    pub file: PathBuf,
    /// Blocks to keep: comma-separated ids (IN0,OUT3) or group names (upper)
    #[arg(long)]
    pub keep: String,
    /// Output adapter file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Base model file
    #[arg(long)]
    pub model: PathBuf,
    /// Adapter file
    #[arg(long)]
    pub adapter: PathBuf,
    /// Merge strength
    #[arg(long, default_value_t = 1.0)]
    pub strength: f64,
    /// Output model file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StudyCombinationArgs {
    /// Base model file
    #[arg(long)]
    pub model: PathBuf,
    /// Cell as NAME=PATH[:W]+PATH[:W]; NAME= alone is the base model; repeatable
    #[arg(long = "cell", required = true)]
    pub cells: Vec<String>,
    /// Prompt shared by every cell
    #[arg(long)]
    pub prompt: Option<String>,
    /// Number of seeds per cell
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Output directory for the report and grids
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StudyBlocksArgs {
    /// Base model file
    #[arg(long)]
    pub model: PathBuf,
    /// Trained identity adapter
    #[arg(long)]
    pub id_adapter: PathBuf,
    /// Style dataset directory
    #[arg(long)]
    pub dataset: PathBuf,
    /// Groups: comma-separated names (upper,middle,bottom) or NAME=IN3+MID+OUT0
    #[arg(long, default_value = "upper,middle,bottom")]
    pub groups: String,
    /// Style trigger (defaults to the dataset's trigger)
    #[arg(long)]
    pub trigger: Option<String>,
    /// Training steps per style adapter
    #[arg(long)]
    pub steps: Option<usize>,
    /// Style adapter rank
    #[arg(long)]
    pub rank: Option<usize>,
    /// Prompt shared by every group
    #[arg(long)]
    pub prompt: Option<String>,
    /// Number of seeds per group
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Output directory for adapters, report and grids
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DeskArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Base pretraining steps
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    /// Training steps for each adapter
    #[arg(long)]
    pub adapter_steps: Option<usize>,
    /// Number of seeds per study cell
    #[arg(long)]
    pub seeds: Option<u64>,
}

fn error_kind(err: &anyhow::Error) -> (u8, &'static str) {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Json(_)) => (2, "usage"),
        Some(Error::Compatibility(_)) => (3, "compatibility"),
        Some(e) if e.is_numeric() => (4, "numeric"),
        Some(Error::Format { .. }) => (1, "format"),
        Some(Error::Io(_)) => (1, "io"),
        _ => (1, "error"),
    }
}

fn single_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn set_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("BWLA_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("BWLA_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error code=2 kind=usage: {}", single_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match set_threads().and_then(|_| commands::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = error_kind(&e);
            eprintln!("error code={code} kind={kind}: {}", single_line(&format!("{e:#}")));
            ExitCode::from(code)
        }
    }
}
