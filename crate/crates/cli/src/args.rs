use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "nspace", version, about = "Shared latent space for RGB and RAW images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset with its manifest.
    GenData(GenDataArgs),
    /// Stage 1: RGB encoder and decoder.
    TrainRgb(TrainArgs),
    /// Stage 2: RAW encoder against the frozen stage-1 decoder.
    TrainRaw(StagedArgs),
    /// Train a task head on frozen stage-1 latents.
    TrainHead(TrainHeadArgs),
    /// Image to latent file.
    Encode(EncodeArgs),
    /// Latent file to image.
    Decode(DecodeArgs),
    /// Affine warp of a latent file.
    Transform(TransformArgs),
    /// Denoise an image through the latent denoiser.
    Denoise(ImageHeadArgs),
    /// Per-pixel class labels for an image.
    Segment(ImageHeadArgs),
    /// Disparity for a stereo pair.
    Depth(DepthArgs),
    /// Corruption similarity of latent vs pixel-baseline embeddings.
    Similarity(SimilarityArgs),
    /// Parameter and FLOP count of a model.
    Profile(ProfileArgs),
    /// Wall-clock timing of a model's forward pass.
    Bench(BenchArgs),
}

/// Flags every command takes.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key = value` file; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// texture, seg, stereo or noise
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    /// Square side; `--height`/`--width` override it.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub d_max: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    /// New run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct StagedArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Stage-1 run directory, or its `rgb_encoder.nsck`.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Head {
    Denoise,
    Seg,
    Depth,
}

#[derive(Args, Debug)]
pub struct TrainHeadArgs {
    #[arg(value_enum)]
    pub head: Head,
    #[command(flatten)]
    pub staged: StagedArgs,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Encoder checkpoint or run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// RGB PNG, or a single-channel mosaic for a RAW encoder.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Decoder checkpoint or run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TransformArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Degrees, counter-clockwise.
    #[arg(long, allow_hyphen_values = true)]
    pub rotate: Option<f64>,
    #[arg(long)]
    pub scale: Option<f64>,
    /// Translation in normalized coordinates ([-1, 1] spans the map).
    #[arg(long, allow_hyphen_values = true)]
    pub tx: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub ty: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ImageHeadArgs {
    #[command(flatten)]
    pub common: Common,
    /// Head checkpoint or the run directory holding it.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Stage-1 run directory; defaults to the one recorded in the head checkpoint.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DepthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    /// 16-bit disparity PNG.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimilarityArgs {
    #[command(flatten)]
    pub common: Common,
    /// Texture dataset; held-out images are used first.
    #[arg(long)]
    pub data: PathBuf,
    /// Stage-1 run directory or encoder checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    /// Pixel-baseline checkpoint; trained on the fly when absent.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub baseline_steps: Option<usize>,
    /// Per-pair values as JSON lines.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub common: Common,
    /// rgb_encoder, raw_encoder, decoder, denoiser, seg, depth or pixel_denoiser
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub d_max: Option<usize>,
    /// Profile a saved model instead of a fresh one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub profile: ProfileArgs,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub warmups: Option<usize>,
}
