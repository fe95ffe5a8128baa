//! `shapeprior`: generate synthetic data, distill it, train and adapt
//! class-conditioned reconstruction models, and evaluate them.
//!
//! Every flag falls back to an environment variable (`SHAPEPRIOR_<FLAG>`,
//! shown in `--help`), then to the TOML file given by `--config`, then to its
//! default. Exit codes: 0 success, 2 configuration error, 3 data or format
//! error, 4 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shapeprior::ErrorKind;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(shapeprior::Error),
}

impl From<shapeprior::Error> for CliError {
    fn from(e: shapeprior::Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Configuration => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            },
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "shapeprior",
    version,
    about = "Few-shot voxel reconstruction with learned class shape priors"
)]
struct Cli {
    /// TOML file with defaults, one table per subcommand.
    #[arg(long, global = true, env = "SHAPEPRIOR_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark (or classes from a JSON spec file).
    GenData(GenDataArgs),
    /// Keep k medoid shapes per class and a few views of each.
    Distill(DistillArgs),
    /// Train a model on the base classes (all classes for `as`).
    Train(TrainArgs),
    /// Adapt the class-specific parameters of novel classes from K shots.
    Adapt(AdaptArgs),
    /// Per-class IoU on the test split.
    Eval(EvalArgs),
    /// Random-class conditioning, codebook knockout or the placement sweep.
    Ablate(AblateArgs),
    /// Oracle nearest-neighbour retrieval from K training shapes.
    Onn(OnnArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long, env = "SHAPEPRIOR_OUT")]
    pub out: Option<PathBuf>,
    /// JSON list of class specifications; the reference benchmark when absent.
    #[arg(long, env = "SHAPEPRIOR_CLASSES_FILE")]
    pub classes_file: Option<PathBuf>,
    #[arg(long, env = "SHAPEPRIOR_RESOLUTION")]
    pub resolution: Option<usize>,
    #[arg(long, env = "SHAPEPRIOR_IMAGE_SIZE")]
    pub image_size: Option<usize>,
    #[arg(long, env = "SHAPEPRIOR_SHAPES_PER_CLASS")]
    pub shapes_per_class: Option<usize>,
    #[arg(long, env = "SHAPEPRIOR_VIEWS")]
    pub views: Option<usize>,
    /// Fraction of shapes in the training split.
    #[arg(long, env = "SHAPEPRIOR_SPLIT")]
    pub split: Option<f64>,
    #[arg(long, env = "SHAPEPRIOR_SEED")]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[arg(long, env = "SHAPEPRIOR_MANIFEST")]
    pub manifest: Option<PathBuf>,
    /// Path of the distilled manifest.
    #[arg(long, env = "SHAPEPRIOR_OUT")]
    pub out: Option<PathBuf>,
    /// Medoids per class.
    #[arg(long, env = "SHAPEPRIOR_K")]
    pub k: Option<usize>,
    /// Views kept per medoid.
    #[arg(long, env = "SHAPEPRIOR_VIEWS")]
    pub views: Option<usize>,
    #[arg(long, env = "SHAPEPRIOR_SEED")]
    pub seed: Option<u64>,
    /// Directory for cached distance matrices.
    #[arg(long, env = "SHAPEPRIOR_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
}

/// Architecture and optimisation flags shared by `train` and `ablate`.
#[derive(Args, Debug, Default)]
pub struct TrainingFlags {
    #[arg(long, env = "SHAPEPRIOR_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "SHAPEPRIOR_LR")]
    pub lr: Option<f64>,
    #[arg(long, env = "SHAPEPRIOR_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    /// `adam` or `sgd_momentum`.
    #[arg(long, env = "SHAPEPRIOR_OPTIMIZER")]
    pub optimizer: Option<String>,
    #[arg(long, env = "SHAPEPRIOR_EMBEDDING_DIM")]
    pub embedding_dim: Option<usize>,
    /// Channel multiplier of the image encoder.
    #[arg(long, env = "SHAPEPRIOR_ENCODER_WIDTH")]
    pub encoder_width: Option<f64>,
    /// Channel multiplier of the voxel decoder.
    #[arg(long, env = "SHAPEPRIOR_DECODER_WIDTH")]
    pub decoder_width: Option<f64>,
    #[arg(long, env = "SHAPEPRIOR_BLOCKS_PER_STAGE")]
    pub blocks_per_stage: Option<usize>,
    #[arg(long, env = "SHAPEPRIOR_CODEBOOKS")]
    pub codebooks: Option<usize>,
    #[arg(long, env = "SHAPEPRIOR_CODES_PER_BOOK")]
    pub codes_per_book: Option<usize>,
    /// Average-shape models: condition each batch on the mean of this many
    /// random training shapes instead of all of them.
    #[arg(long, env = "SHAPEPRIOR_PRIOR_SUBSET")]
    pub prior_subset: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// zs, as, wallace, gce, cgce, mcce-dec, mcce-full, hybrid, or a placement
    /// variant (mcce-enc, cab-enc, cab-dec, cab-full).
    #[arg(long, env = "SHAPEPRIOR_VARIANT")]
    pub variant: Option<String>,
    #[arg(long, env = "SHAPEPRIOR_MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[arg(long, env = "SHAPEPRIOR_SEED")]
    pub seed: Option<u64>,
    /// Checkpoint to write.
    #[arg(long, env = "SHAPEPRIOR_OUT")]
    pub out: Option<PathBuf>,
    /// Per-epoch loss curve (CSV).
    #[arg(long, env = "SHAPEPRIOR_CURVE")]
    pub curve: Option<PathBuf>,
    #[command(flatten)]
    pub training: TrainingFlags,
}

/// Novel-class adaptation flags shared by `adapt` and `ablate`.
#[derive(Args, Debug, Default)]
pub struct AdaptFlags {
    /// Support shots per novel class.
    #[arg(long, env = "SHAPEPRIOR_SHOTS")]
    pub shots: Option<usize>,
    #[arg(long, env = "SHAPEPRIOR_STEPS")]
    pub steps: Option<usize>,
    /// Adaptation learning rate.
    #[arg(long = "adapt-lr", env = "SHAPEPRIOR_ADAPT_LR")]
    pub adapt_lr: Option<f64>,
    #[arg(long, env = "SHAPEPRIOR_MOMENTUM")]
    pub momentum: Option<f64>,
    /// Steps without improvement of the support loss before stopping.
    #[arg(long, env = "SHAPEPRIOR_PATIENCE")]
    pub patience: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    #[arg(long, env = "SHAPEPRIOR_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "SHAPEPRIOR_MANIFEST")]
    pub manifest: Option<PathBuf>,
    /// Novel class to adapt; repeat or separate with commas. Every novel class
    /// of the manifest when absent.
    #[arg(long = "class", env = "SHAPEPRIOR_CLASS", value_delimiter = ',')]
    pub classes: Vec<String>,
    /// Episode seed.
    #[arg(long, env = "SHAPEPRIOR_SEED")]
    pub seed: Option<u64>,
    /// Adapted checkpoint to write.
    #[arg(long, env = "SHAPEPRIOR_OUT")]
    pub out: Option<PathBuf>,
    /// Learning rate (alias of --adapt-lr).
    #[arg(long, env = "SHAPEPRIOR_LR")]
    pub lr: Option<f64>,
    #[command(flatten)]
    pub adapt: AdaptFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, env = "SHAPEPRIOR_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "SHAPEPRIOR_MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[arg(long, env = "SHAPEPRIOR_THRESHOLD")]
    pub threshold: Option<f64>,
    /// Classes to evaluate; every manifest class when absent.
    #[arg(long, env = "SHAPEPRIOR_CLASSES", value_delimiter = ',')]
    pub classes: Vec<String>,
    /// `csv` or `markdown`.
    #[arg(long, env = "SHAPEPRIOR_FORMAT")]
    pub format: Option<String>,
    /// Report file; standard output when absent.
    #[arg(long, env = "SHAPEPRIOR_OUT")]
    pub out: Option<PathBuf>,
    /// Zero-shot checkpoint to compute relative gains against.
    #[arg(long, env = "SHAPEPRIOR_ZS")]
    pub zs: Option<PathBuf>,
    /// Method label of the rows; derived from the checkpoint when absent.
    #[arg(long, env = "SHAPEPRIOR_METHOD")]
    pub method: Option<String>,
    /// Also write thresholded predictions and ground truth as binvox files.
    #[arg(long, env = "SHAPEPRIOR_EXPORT_DIR")]
    pub export_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// gce-rand, codebook-knockout or placement-sweep.
    #[arg(long, env = "SHAPEPRIOR_KIND")]
    pub kind: Option<String>,
    /// Trained model; for the placement sweep only its architecture is used.
    #[arg(long, env = "SHAPEPRIOR_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "SHAPEPRIOR_MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[arg(long, env = "SHAPEPRIOR_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "SHAPEPRIOR_CLASSES", value_delimiter = ',')]
    pub classes: Vec<String>,
    #[arg(long, env = "SHAPEPRIOR_THRESHOLD")]
    pub threshold: Option<f64>,
    #[arg(long, env = "SHAPEPRIOR_FORMAT")]
    pub format: Option<String>,
    #[arg(long, env = "SHAPEPRIOR_OUT")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub training: TrainingFlags,
    #[command(flatten)]
    pub adapt: AdaptFlags,
}

#[derive(Args, Debug)]
pub struct OnnArgs {
    #[arg(long, env = "SHAPEPRIOR_MANIFEST")]
    pub manifest: Option<PathBuf>,
    /// Size K of the retrieval database, or `full`.
    #[arg(long, env = "SHAPEPRIOR_SHOTS")]
    pub shots: Option<String>,
    /// Random databases drawn per query.
    #[arg(long, env = "SHAPEPRIOR_EPISODES")]
    pub episodes: Option<usize>,
    #[arg(long, env = "SHAPEPRIOR_SEED")]
    pub seed: Option<u64>,
    /// Classes to score; every novel class when absent.
    #[arg(long, env = "SHAPEPRIOR_CLASSES", value_delimiter = ',')]
    pub classes: Vec<String>,
    #[arg(long, env = "SHAPEPRIOR_FORMAT")]
    pub format: Option<String>,
    #[arg(long, env = "SHAPEPRIOR_OUT")]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = cli.config.as_deref();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a, config),
        Command::Distill(a) => commands::distill(a, config),
        Command::Train(a) => commands::train(a, config),
        Command::Adapt(a) => commands::adapt(a, config),
        Command::Eval(a) => commands::eval(a, config),
        Command::Ablate(a) => commands::ablate(a, config),
        Command::Onn(a) => commands::onn(a, config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
