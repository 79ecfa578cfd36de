//! The `ufl` command line: each subcommand reads files written by earlier
//! stages and writes its own outputs plus the configuration it resolved.

mod commands;
pub mod config;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "ufl",
    version,
    about = "Unsupervised embeddings for image chips: train, evaluate, search, inspect"
)]
pub struct Cli {
    /// Maximum worker threads; defaults to one per core.
    #[arg(long, global = true, env = "UFL_THREADS")]
    pub threads: Option<usize>,

    /// TOML run configuration; command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut square chips around annotated boxes and split them into train/test.
    Chip(ChipArgs),
    /// Render an imbalanced synthetic chip dataset.
    Synth(SynthArgs),
    /// Train an encoder (instance discrimination or a baseline).
    Train(TrainArgs),
    /// Weighted-KNN classification of the test split.
    Eval(EvalArgs),
    /// Most similar training chips for every query chip.
    Search(SearchArgs),
    /// Flag chips far from every other chip of their class.
    Outliers(OutlierArgs),
    /// Cluster classes by confusion into a dendrogram.
    Hierarchy(HierarchyArgs),
    /// Project embeddings onto their top two principal axes.
    Project(ProjectArgs),
    /// Expected accuracy of frequency-weighted random guessing.
    Baseline(BaselineArgs),
}

#[derive(Debug, Args)]
pub struct ChipArgs {
    /// JSON-lines annotations: {"image", "bbox": [x0, y0, x1, y1], "class_id"}.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory that image paths in the manifest are relative to.
    #[arg(long)]
    pub images: PathBuf,
    /// Class names, one per line, in class-id order.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Total chips over both splits.
    #[arg(long)]
    pub total: Option<usize>,
    /// Largest-to-smallest class size ratio; sets the power-law exponent.
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub side: Option<usize>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    Ufl,
    Autoencoder,
    Supervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Exact,
    Nce,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = TrainMode::Ufl)]
    pub mode: TrainMode,
    /// Instance-discrimination objective (ufl mode only).
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Dataset directory written by `synth` or `chip`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint, bank and logs.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Noise samples per positive in NCE mode.
    #[arg(long)]
    pub noise_samples: Option<usize>,
    /// Seeds both weight initialization and training.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Where embeddings come from: a saved bank, or the training split
/// embedded with a checkpoint.
#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Bank file to use instead of embedding the training split.
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Output directory for the report, per-class table and confusion matrices.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub k: Option<usize>,
    /// Split whose chips are the queries.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Output JSON-lines file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StdArg {
    Population,
    Sample,
}

#[derive(Debug, Args)]
pub struct OutlierArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Flag distances more than this many standard deviations above the class mean.
    #[arg(long)]
    pub sigmas: Option<f64>,
    #[arg(long, value_enum)]
    pub std: Option<StdArg>,
    /// Output JSON report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LinkageArg {
    Average,
    Single,
    Complete,
}

#[derive(Debug, Args)]
pub struct HierarchyArgs {
    /// Confusion-matrix CSV written by `eval`.
    #[arg(long)]
    pub confusion: PathBuf,
    #[arg(long, value_enum)]
    pub linkage: Option<LinkageArg>,
    /// Output directory for hierarchy.nwk, hierarchy.json and hierarchy.txt.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV `id,x,y,label`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Averaging {
    Instance,
    Class,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GuessArg {
    /// N independent draws.
    Independent,
    /// N distinct classes.
    WithoutReplacement,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// CSV `class,train_count,test_count`; defaults to the shipped xView table.
    #[arg(long)]
    pub populations: Option<PathBuf>,
    /// Number of guesses; without it both top-1 and top-5 are shown.
    #[arg(long)]
    pub top: Option<usize>,
    /// Print only this average, as a bare number.
    #[arg(long, value_enum)]
    pub averaging: Option<Averaging>,
    #[arg(long, value_enum, default_value_t = GuessArg::Independent)]
    pub guess: GuessArg,
    /// Also list each class's hit probability.
    #[arg(long)]
    pub per_class: bool,
}

/// Runs one parsed command line, printing any report to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // Fails only if a pool already exists, e.g. on a second in-process run.
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::debug!("keeping the existing thread pool: {e}");
        }
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Chip(a) => commands::chip(a, cfg, &mut out),
        Command::Synth(a) => commands::synth(a, cfg, &mut out),
        Command::Train(a) => commands::train(a, cfg, &mut out),
        Command::Eval(a) => commands::eval(a, cfg, &mut out),
        Command::Search(a) => commands::search(a, cfg),
        Command::Outliers(a) => commands::outliers(a, cfg, &mut out),
        Command::Hierarchy(a) => commands::hierarchy(a, cfg, &mut out),
        Command::Project(a) => commands::project(a, cfg),
        Command::Baseline(a) => commands::baseline(a, &mut out),
    }
}
