use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Parser)]
#[command(name = "sir", version, about = "Self-iterative landmark regression experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a seeded synthetic landmark dataset.
    Synth(SynthArgs),
    /// Fit the shape model to a dataset's annotations.
    FitModel(FitModelArgs),
    /// Train one self-iterative regressor.
    TrainSir(TrainArgs),
    /// Train a K-stage cascaded baseline.
    TrainCr(TrainCrArgs),
    /// Locate landmarks and write one .pts per image.
    Detect(DetectArgs),
    /// Score predictions against annotations.
    Eval(EvalArgs),
    /// Dump sampled training shapes and targets.
    SampleDump(SampleDumpArgs),
    /// Write the CED curve of an evaluation report as CSV.
    CedExport(CedExportArgs),
    /// Train and evaluate over a grid of sampling widths.
    SweepSigma(SweepSigmaArgs),
    /// Evaluate a trained regressor after 0..K iterations.
    SweepIters(SweepItersArgs),
    /// Rerun a command from its config.json snapshot.
    #[serde(skip)]
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::FitModel(_) => "fit-model",
            Command::TrainSir(_) => "train-sir",
            Command::TrainCr(_) => "train-cr",
            Command::Detect(_) => "detect",
            Command::Eval(_) => "eval",
            Command::SampleDump(_) => "sample-dump",
            Command::CedExport(_) => "ced-export",
            Command::SweepSigma(_) => "sweep-sigma",
            Command::SweepIters(_) => "sweep-iters",
            Command::Replay(_) => "replay",
        }
    }

    pub fn out_dir(&self) -> Option<&Path> {
        Some(match self {
            Command::Synth(a) => &a.out,
            Command::FitModel(a) => &a.out,
            Command::TrainSir(a) => &a.out,
            Command::TrainCr(a) => &a.train.out,
            Command::Detect(a) => &a.out,
            Command::Eval(a) => &a.out,
            Command::SampleDump(a) => &a.out,
            Command::CedExport(a) => &a.out,
            Command::SweepSigma(a) => &a.train.out,
            Command::SweepIters(a) => &a.out,
            Command::Replay(_) => return None,
        })
    }

    pub fn set_out_dir(&mut self, dir: PathBuf) {
        match self {
            Command::Synth(a) => a.out = dir,
            Command::FitModel(a) => a.out = dir,
            Command::TrainSir(a) => a.out = dir,
            Command::TrainCr(a) => a.train.out = dir,
            Command::Detect(a) => a.out = dir,
            Command::Eval(a) => a.out = dir,
            Command::SampleDump(a) => a.out = dir,
            Command::CedExport(a) => a.out = dir,
            Command::SweepSigma(a) => a.train.out = dir,
            Command::SweepIters(a) => a.out = dir,
            Command::Replay(a) => a.out = Some(dir),
        }
    }

    /// Every path the command reads or writes, so they can be made absolute
    /// before the snapshot is written.
    pub fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            Command::Synth(a) => vec![&mut a.out],
            Command::FitModel(a) => vec![&mut a.data, &mut a.out],
            Command::TrainSir(a) => a.paths_mut(),
            Command::TrainCr(a) => a.train.paths_mut(),
            Command::Detect(a) => {
                let mut v = vec![&mut a.data, &mut a.model, &mut a.out];
                v.extend(a.net.iter_mut());
                v
            }
            Command::Eval(a) => vec![&mut a.data, &mut a.pred, &mut a.out],
            Command::SampleDump(a) => vec![&mut a.data, &mut a.model, &mut a.out],
            Command::CedExport(a) => vec![&mut a.report, &mut a.out],
            Command::SweepSigma(a) => {
                let mut v = a.train.paths_mut();
                v.push(&mut a.test);
                v
            }
            Command::SweepIters(a) => {
                let mut v = vec![&mut a.data, &mut a.model, &mut a.out];
                v.extend(a.net.iter_mut());
                v
            }
            Command::Replay(a) => {
                let mut v = vec![&mut a.config];
                v.extend(a.out.as_mut());
                v
            }
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub landmarks: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 3)]
    pub components: usize,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Fixes the shape basis and landmark appearance; share it between
    /// train and test sets.
    #[arg(long, default_value_t = 7)]
    pub appearance_seed: u64,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitModelArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of shape variance the kept components explain.
    #[arg(long, default_value_t = 0.98)]
    pub variance: f64,
    #[arg(long, default_value_t = 64)]
    pub face_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkKind {
    /// One sub-network per landmark patch.
    Lan,
    /// All patches stacked into one input, parameter-matched to LAN.
    Stack,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Shape model written by fit-model.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = NetworkKind::Lan)]
    pub network: NetworkKind,
    #[arg(long, default_value_t = 17)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub face_size: usize,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, default_value_t = 10)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0.2)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub mixture_weight: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Single-threaded, bit-reproducible training.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 500)]
    pub validate_every: usize,
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
}

impl TrainArgs {
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.data, &mut self.model, &mut self.out]
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainCrArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value_t = 4)]
    pub stages: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Checkpoint file or training output directory. Repeat for a cascade;
    /// a train-cr directory expands to its stages.
    #[arg(long, required = true)]
    pub net: Vec<PathBuf>,
    /// Self-iterations; ignored for cascades.
    #[arg(long, default_value_t = 4)]
    pub iterations: usize,
    #[arg(long, default_value_t = 64)]
    pub face_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationKind {
    /// Inter-ocular for 68 points, otherwise the two --eyes points.
    Auto,
    InterPupil,
    InterOcular,
    EyePoints,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MetricArgs {
    #[arg(long, value_enum, default_value_t = NormalizationKind::Auto)]
    pub normalization: NormalizationKind,
    /// Landmark indices used by eye-points normalization.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0usize, 1])]
    pub eyes: Vec<usize>,
    #[arg(long, default_value_t = 0.08)]
    pub threshold: f64,
    #[arg(long, default_value_t = 81)]
    pub bins: usize,
    /// Score only the 51 inner points of a 68-point annotation.
    #[arg(long)]
    pub subset51: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Manifest with ground-truth annotations.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of predicted .pts files written by detect.
    #[arg(long)]
    pub pred: PathBuf,
    #[command(flatten)]
    pub metric: MetricArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SampleDumpArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub face_size: usize,
    #[arg(long, default_value_t = 17)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 0.2)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub mixture_weight: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CedExportArgs {
    /// report.json written by eval.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepSigmaArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Held-out manifest used for scoring.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.1, 0.2, 0.4])]
    pub sigmas: Vec<f64>,
    #[arg(long, default_value_t = 4)]
    pub iterations: usize,
    #[command(flatten)]
    pub metric: MetricArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepItersArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// As for detect; a cascade is scored after each of its stages.
    #[arg(long, required = true)]
    pub net: Vec<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub max_k: usize,
    #[arg(long, default_value_t = 64)]
    pub face_size: usize,
    #[command(flatten)]
    pub metric: MetricArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// config.json written by an earlier run.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the one recorded in the snapshot.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
