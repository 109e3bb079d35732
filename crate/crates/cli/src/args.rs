use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Fits a parametric body model to 2D landmark observations.
#[derive(Debug, Parser)]
#[command(name = "bodyfit", version)]
pub struct Cli {
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Builds a procedural model file.
    ToyModel(ToyModelArgs),
    /// Generates a synthetic sequence: ground truth, rig and observations.
    Synth(SynthArgs),
    /// Draws pose or shape vectors for prior training.
    Samples(SamplesArgs),
    /// Trains a flow or GMM prior.
    TrainPrior(TrainPriorArgs),
    /// Estimates camera poses from face landmarks.
    Calibrate(CalibrateArgs),
    /// Fits the model to observations.
    Fit(FitArgs),
    /// Scores a fit against ground truth.
    Eval(EvalArgs),
    /// Writes the default fitting settings.
    InitConfig(InitConfigArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Desk,
    FullScale,
}

#[derive(Debug, Args)]
pub struct ToyModelArgs {
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Model recipe (JSON); overrides --preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Full generator settings (JSON); flags given explicitly override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub cams: Option<usize>,
    #[arg(long)]
    pub noise_px: Option<f64>,
    #[arg(long)]
    pub occlusion: Option<f64>,
    /// Report the true sigma for occluded landmarks instead of the inflated one.
    #[arg(long)]
    pub no_sigma_inflation: bool,
    #[arg(long)]
    pub image_size: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drops this fraction of landmark records after generation.
    #[arg(long, default_value_t = 0.0)]
    pub drop: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SampleKind {
    BodyPose,
    HandPose,
    BodyShape,
    FaceShape,
}

#[derive(Debug, Args)]
pub struct SamplesArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum)]
    pub kind: SampleKind,
    /// Number of frames (poses) or draws (shapes).
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PriorKind {
    Flow,
    Gmm,
}

#[derive(Debug, Args)]
pub struct TrainPriorArgs {
    #[arg(long, value_enum)]
    pub kind: PriorKind,
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 4)]
    pub components: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub obs: PathBuf,
    /// Take intrinsics from this rig instead of the image-size defaults.
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Prior files and settings shared by `fit` and `eval --views`.
#[derive(Debug, Args)]
pub struct FitInputs {
    /// Settings file; defaults to `default.weights` in $BODYFIT_CONFIG_DIR, then built-in defaults.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub body_prior: Option<PathBuf>,
    #[arg(long)]
    pub hand_prior: Option<PathBuf>,
    #[arg(long)]
    pub body_shape_prior: Option<PathBuf>,
    #[arg(long)]
    pub face_shape_prior: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub obs: PathBuf,
    #[arg(long, required_unless_present = "no_rig", conflicts_with = "no_rig")]
    pub rig: Option<PathBuf>,
    /// Calibrate the cameras from the observations before fitting.
    #[arg(long)]
    pub no_rig: bool,
    #[command(flatten)]
    pub inputs: FitInputs,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for one OBJ mesh per frame.
    #[arg(long)]
    pub meshes: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub result: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// View counts to re-fit, as `k` or `a..b` (inclusive).
    #[arg(long, requires_all = ["obs", "rig"])]
    pub views: Option<String>,
    #[arg(long)]
    pub obs: Option<PathBuf>,
    #[arg(long)]
    pub rig: Option<PathBuf>,
    #[command(flatten)]
    pub inputs: FitInputs,
}

#[derive(Debug, Args)]
pub struct InitConfigArgs {
    #[arg(long)]
    pub out: PathBuf,
}
