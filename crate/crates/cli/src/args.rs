use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "udvd", version, about = "Unsupervised blind-spot video denoising")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic video with known motion, optionally with noise.
    Synth(SynthArgs),
    /// Train a denoiser on noisy frames alone.
    Train(TrainArgs),
    /// Denoise a frame sequence with a trained model.
    Denoise(DenoiseArgs),
    /// Inspect a trained model through its equivalent filters.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Png,
    Pgm8,
    Pgm16,
    Bin,
}

impl From<Format> for udvd::data_metrics::FrameFormat {
    fn from(f: Format) -> Self {
        use udvd::data_metrics::FrameFormat;
        match f {
            Format::Png => FrameFormat::Png8,
            Format::Pgm8 => FrameFormat::Pgm8,
            Format::Pgm16 => FrameFormat::Pgm16,
            Format::Bin => FrameFormat::Bin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Color {
    Gray,
    Rgb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SigmaMode {
    Known,
    Estimate,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Width {
    /// Narrow channels for CPU runs.
    Desk,
    /// Full channel widths.
    Full,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub length: usize,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long, default_value_t = 96)]
    pub width: usize,
    /// Background motion `dx,dy` in pixels per frame.
    #[arg(long, default_value = "1,0", value_parser = parse_pair::<i32>, allow_hyphen_values = true)]
    pub velocity: (i32, i32),
    /// Add the moving disc and rectangle of the benchmark scene.
    #[arg(long)]
    pub objects: bool,
    #[arg(long, value_enum, default_value = "gray")]
    pub color: Color,
    /// Noise level of the additional noisy copy; 0 skips it.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "bin")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Noisy frame sequence (directory or `.bin`); repeat for several videos.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training configuration in `key = value` form; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frames per input window.
    #[arg(long, default_value_t = 5, value_parser = parse_frames)]
    pub frames: usize,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, value_enum)]
    pub sigma_mode: Option<SigmaMode>,
    /// Comma-separated: flip, time-reverse, subsample, or none.
    #[arg(long)]
    pub augment: Option<String>,
    /// Train on one video with all augmentations unless `--augment` says otherwise.
    #[arg(long)]
    pub single_video: bool,
    /// Hold out the last N frames of each video for early stopping.
    #[arg(long)]
    pub early_stop_frames: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum, default_value = "desk")]
    pub width: Width,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Clean reference; enables the PSNR/SSIM report.
    #[arg(long)]
    pub clean: Option<PathBuf>,
    /// Keep the blind-spot estimate and ignore the observed pixel.
    #[arg(long)]
    pub no_fusion: bool,
    #[arg(long, value_enum, default_value = "bin")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(subcommand)]
    pub what: AnalyzeCommand,
}

#[derive(Debug, Args)]
pub struct AnalyzeCommon {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Central frame of the analysed window; defaults to the middle frame.
    #[arg(long)]
    pub frame: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Heatmaps of the equivalent filter of one pixel.
    Filters {
        #[command(flatten)]
        common: AnalyzeCommon,
        #[arg(long, value_parser = parse_pair::<usize>)]
        pixel: (usize, usize),
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// Differentiate the fused output instead of the blind-spot mean.
        #[arg(long)]
        post_fusion: bool,
    },
    /// Motion estimated from filter centroids on a pixel grid.
    Flow {
        #[command(flatten)]
        common: AnalyzeCommon,
        #[arg(long, default_value_t = 8)]
        grid: usize,
        /// Pixels this close to the border are skipped.
        #[arg(long, default_value_t = 8)]
        margin: usize,
        /// Fewest entries above the centroid threshold for a valid pixel.
        #[arg(long, default_value_t = 4)]
        min_support: usize,
        /// Ground-truth flows (`[T-1, 3, H, W]` array from `synth`).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Per-frame filter sums over a random pixel sample.
    Contributions {
        #[command(flatten)]
        common: AnalyzeCommon,
        #[arg(long, default_value_t = 500)]
        pixels: usize,
        #[arg(long, default_value_t = 0.05)]
        bin_width: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> Result<(T, T), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected two comma-separated values, got `{s}`"))?;
    let p = |v: &str| {
        v.trim()
            .parse::<T>()
            .map_err(|_| format!("cannot parse `{v}`"))
    };
    Ok((p(a)?, p(b)?))
}

fn parse_frames(s: &str) -> Result<usize, String> {
    match s.parse() {
        Ok(k @ (1 | 3 | 5)) => Ok(k),
        _ => Err(format!("frames must be 1, 3 or 5, got `{s}`")),
    }
}
