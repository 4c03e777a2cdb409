use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "incepformer",
    version,
    about = "Cost analysis, gradient checks, training and inference for IncepFormer models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer parameter and FLOP report.
    Analyze(AnalyzeArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Train on synthetic scenes, logging `iter,lr,loss` lines.
    Train(TrainArgs),
    /// mIoU of a model on synthetic scenes.
    Eval(EvalArgs),
    /// Write the predicted class mask of one image.
    Infer(InferArgs),
}

/// `WxH`, as written on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent {
    pub width: usize,
    pub height: usize,
}

impl FromStr for Extent {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
        let dim = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad dimension `{v}`: {e}"))
        };
        Ok(Extent {
            width: dim(w)?,
            height: dim(h)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PatchModeArg {
    Nonoverlap,
    Overlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConventionArg {
    /// Every counted operation, including attention products and elementwise work.
    Full,
    /// Convolutions and projections only.
    ModuleHooks,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Preset name (ipt-t, ipt-s, ipt-b, micro) or path to a JSON config.
    #[arg(long, default_value = "micro")]
    pub model: String,
    /// Overrides the patch embedding geometry of the config.
    #[arg(long, value_enum)]
    pub patch_mode: Option<PatchModeArg>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input size; without it only parameters are counted.
    #[arg(long)]
    pub input: Option<Extent>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    #[arg(long, value_enum, default_value_t = ConventionArg::Full)]
    pub convention: ConventionArg,
    /// Compare decoder widths instead, e.g. `256,512,768`.
    #[arg(long, value_delimiter = ',')]
    pub decoder_channels: Vec<usize>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Gradient checks run in double precision only.
    #[arg(long, value_enum, default_value_t = Dtype::F64)]
    pub dtype: Dtype,
    #[arg(long, default_value = "32x32")]
    pub input: Extent,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Central difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Skip the whole-model check and run the kernel suite only.
    #[arg(long)]
    pub ops_only: bool,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

/// Synthetic scene set used by `train` and `eval`.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Number of scenes.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    /// Scene size.
    #[arg(long, default_value = "64x64")]
    pub input: Extent,
    /// Seed of the scene generator; defaults to --seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON training config; the flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    pub dtype: Dtype,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Defaults to the scene size.
    #[arg(long)]
    pub crop: Option<Extent>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Where the final checkpoint goes.
    #[arg(long, default_value = "incepformer.ckpt")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Weights to evaluate; without it the model is freshly initialized from --seed.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    pub dtype: Dtype,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// PPM, PGM or PNG image. Without it a synthetic scene is rendered.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Size of the synthetic scene.
    #[arg(long, default_value = "64x64")]
    pub input: Extent,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    pub dtype: Dtype,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class-index mask, binary PGM.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional color rendering of the mask, binary PPM.
    #[arg(long)]
    pub color: Option<PathBuf>,
}
