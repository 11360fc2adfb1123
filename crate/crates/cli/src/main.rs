//! `drn`: build, train, evaluate and analyze dilated residual networks.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "drn", version, about = "Dilated residual networks at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic shapes dataset.
    Synth(SynthArgs),
    /// Build a freshly initialized model.
    Build(BuildArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Classification error under the 1-crop or 10-crop protocol.
    Eval(EvalArgs),
    /// Export one class activation map as a PGM heatmap.
    Cam(CamArgs),
    /// Weakly-supervised localization from class activation maps.
    Localize(LocalizeArgs),
    /// Receptive field of a level's units.
    Rf(RfArgs),
    /// Lattice-energy gridding reports for several models.
    Grid(GridArgs),
    /// Dense labelling of one image, or mean IoU over a dataset.
    Segment(SegmentArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// classify, localize or segment.
    #[arg(long, default_value = "classify")]
    pub task: String,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub extent: usize,
    /// Class count; for segment this includes background.
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct BuildArgs {
    /// resnet, drn-a, drn-b or drn-c.
    #[arg(long)]
    pub arch: String,
    #[arg(long)]
    pub depth: usize,
    /// Channel multiplier such as 1, 1/8 or 0.5.
    #[arg(long, default_value = "1")]
    pub width: String,
    #[arg(long, default_value_t = 1000)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` training configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Held-out dataset scored after every epoch.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write per-epoch metrics to this file.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// 1crop or 10crop.
    #[arg(long, default_value = "1crop")]
    pub protocol: String,
    /// Crop extent; defaults to the image extent for 1crop and 7/8 of it
    /// (rounded to the output stride) for 10crop.
    #[arg(long)]
    pub crop: Option<usize>,
}

#[derive(Args)]
pub struct CamArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Class to export; the top-scoring class when omitted.
    #[arg(long)]
    pub class: Option<usize>,
    /// Export raw scores instead of softmax probabilities.
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Activation threshold on the response maps.
    #[arg(long, default_value_t = 0.25)]
    pub t: f32,
    /// top1 or top5.
    #[arg(long, default_value = "top1")]
    pub protocol: String,
    /// Ten-crop extent used to rank classes.
    #[arg(long)]
    pub crop: Option<usize>,
    /// Threshold raw scores instead of softmax probabilities.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Args)]
pub struct RfArgs {
    /// Model file; alternatively give --arch and --depth.
    #[arg(long, conflicts_with_all = ["arch", "depth"])]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "depth")]
    pub arch: Option<String>,
    #[arg(long, requires = "arch")]
    pub depth: Option<usize>,
    #[arg(long, default_value = "1")]
    pub width: String,
    #[arg(long)]
    pub level: usize,
    /// Also measure the field from input-gradient support.
    #[arg(long)]
    pub empirical: bool,
}

#[derive(Args)]
pub struct GridArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    /// Probe with a single centred impulse (the default).
    #[arg(long, conflicts_with = "image")]
    pub impulse: bool,
    /// Probe with this image instead.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Impulse input extent.
    #[arg(long, default_value_t = 64)]
    pub extent: usize,
}

#[derive(Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, conflicts_with = "data", requires = "out")]
    pub image: Option<PathBuf>,
    /// Label-map PGM written for --image.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Segmentation dataset to score.
    #[arg(long, required_unless_present = "image")]
    pub data: Option<PathBuf>,
}

/// Bad input detected by the command layer itself.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| {
        e.downcast_ref::<Usage>().is_some()
            || e.downcast_ref::<drn::Error>().is_some_and(drn::Error::is_validation)
    });
    if validation { 2 } else { 1 }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("DRN_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Usage(format!("DRN_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Build(a) => commands::build(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Cam(a) => commands::cam(a),
        Command::Localize(a) => commands::localize(a),
        Command::Rf(a) => commands::rf(a),
        Command::Grid(a) => commands::grid(a),
        Command::Segment(a) => commands::segment(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
