use std::path::PathBuf;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "tcinn",
    version,
    about = "Paired image translation with an invertible coupling network"
)]
pub struct Cli {
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic paired dataset and its manifest.
    Phantom(PhantomArgs),
    /// Train a model on a manifest; writes model.ckpt and loss.csv.
    Train(TrainArgs),
    /// Apply a trained model to one image.
    Infer(InferArgs),
    /// Score predictions against a manifest's targets.
    Eval(EvalArgs),
    /// Train and score one model per channel count.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SsimArg {
    Windowed,
    Global,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Read default flag values from a `key=value` file; flags given here win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image height and width.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(16..))]
    pub size: u64,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub pairs: u64,
    #[arg(long, default_value_t = 3)]
    pub min_blobs: usize,
    #[arg(long, default_value_t = 8)]
    pub max_blobs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub background: f64,
    /// Stored value type.
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Model and optimisation settings shared by `train` and `ablate`.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Coupling blocks.
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    /// Convolution layers per dense block.
    #[arg(long, default_value_t = 8)]
    pub dense_layers: usize,
    /// Channels added by each dense layer.
    #[arg(long, default_value_t = 16)]
    pub growth: usize,
    /// Soft clamp bound of the log scale.
    #[arg(long, default_value_t = 2.0)]
    pub clamp: f64,
    /// Insert an actnorm layer at the start of every block.
    #[arg(long, default_value_t = false)]
    pub actnorm: bool,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    /// Initial learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Epochs between learning-rate halvings.
    #[arg(long, default_value_t = 50)]
    pub halving_period: usize,
    /// Weight of the forward term of the loss.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rescale gradients above this global norm [default: off].
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Compute type.
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Read default flag values from a `key=value` file; flags given here win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Augmentation width C.
    #[arg(long, default_value_t = 3, value_parser = PossibleValuesParser::new(["3", "6", "9"]).map(|s| s.parse::<usize>().unwrap()))]
    pub channels: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Continue from this checkpoint [default: none].
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Validate the inputs and write the initial model without training.
    #[arg(long, default_value_t = false)]
    pub dry_run: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Read default flag values from a `key=value` file; flags given here win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// forward maps source to target, inverse maps target to source.
    #[arg(long, value_enum, default_value_t = Direction::Forward)]
    pub direction: Direction,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Read default flag values from a `key=value` file; flags given here win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Predict with this checkpoint.
    #[arg(long, conflicts_with = "pred_dir", required_unless_present = "pred_dir")]
    pub ckpt: Option<PathBuf>,
    /// Read predictions from this directory, one file per pair named like its target.
    #[arg(long)]
    pub pred_dir: Option<PathBuf>,
    /// Report CSV to write.
    #[arg(long)]
    pub report: PathBuf,
    /// Injected dose in mCi; enables the SUV columns with --suv-weight and a mask [default: off].
    #[arg(long, requires = "suv_weight")]
    pub suv_id: Option<f64>,
    /// Body weight in kg [default: off].
    #[arg(long, requires = "suv_id")]
    pub suv_weight: Option<f64>,
    /// Mask file for every pair; otherwise the manifest's per-pair masks [default: none].
    #[arg(long)]
    pub voi: Option<PathBuf>,
    /// Volume of one mask element in mL.
    #[arg(long, default_value_t = 1.0)]
    pub voxel_volume: f64,
    /// Peak value for PSNR.
    #[arg(long, default_value_t = 1.0)]
    pub max_val: f64,
    /// Reference pixels below this value are skipped by the relative error.
    #[arg(long, default_value_t = 0.01)]
    pub mae_eps: f64,
    #[arg(long, value_enum, default_value_t = SsimArg::Windowed)]
    pub ssim: SsimArg,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Read default flag values from a `key=value` file; flags given here win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Held-out manifest for scoring.
    #[arg(long)]
    pub heldout: PathBuf,
    /// Channel counts to compare.
    #[arg(long, value_delimiter = ',', default_values_t = [3usize, 6, 9])]
    pub channels: Vec<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value_t = SsimArg::Windowed)]
    pub ssim: SsimArg,
    /// Output directory; one subdirectory per channel count plus ablation.csv.
    #[arg(long)]
    pub out: PathBuf,
}
