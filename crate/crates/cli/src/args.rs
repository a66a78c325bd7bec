use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use stabfi::fi::Measure;
use stabfi::harness::SparsifyStrategy;
use stabfi::merge::{MergeMethod, TiesStage, DEFAULT_DARE_DROP, DEFAULT_TIES_DENSITY};
use stabfi::reference::{CALIBRATION_SAMPLES, GRAMMAR_LEN, GRAMMAR_VOCAB};
use stabfi::seq::{DEFAULT_HORIZON, DEFAULT_L_MAX, DEFAULT_SAMPLES};
use stabfi::zoo::Arch;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "stab",
    version,
    about = "Stability measures, attacks, sparsification and merging on a toy model zoo",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Write a synthetic dataset as JSONL.
    GenData(GenDataArgs),
    /// Train a zoo model, or fine-tune one with --init.
    Train(TrainArgs),
    /// Per-unit stability map of one input or a calibration mean.
    FiMap(FiMapArgs),
    /// Measure-guided input attacks.
    #[command(subcommand)]
    Attack(AttackCommand),
    /// Accuracy after zeroing ranked or random parameters.
    Sparsify(SparsifyArgs),
    /// Monte Carlo FI of generated sequences.
    SeqFi(SeqFiArgs),
    /// Merge two fine-tunes of a shared base, optionally over the standard search grid.
    Merge(MergeArgs),
    /// Combine report CSVs into one comparison table.
    Report(ReportArgs),
    /// Rerun a manifest and check its outputs are byte-identical.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::FiMap(_) => "fi-map",
            Command::Attack(AttackCommand::Pixels(_)) => "attack pixels",
            Command::Attack(AttackCommand::Embed(_)) => "attack embed",
            Command::Sparsify(_) => "sparsify",
            Command::SeqFi(_) => "seq-fi",
            Command::Merge(_) => "merge",
            Command::Report(_) => "report",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    /// 16×16 RGB shapes on a textured background.
    Shapes,
    /// Gaussian blobs in 16 dimensions.
    Blobs,
    /// Stochastic successor grammar.
    Grammar,
    /// Deterministic cycle s → s+1.
    Cycle,
    /// First domain of the two-task zoo.
    TaskA,
    /// Second domain of the two-task zoo.
    TaskB,
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: DataKind,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Classes for shapes and blobs.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, default_value_t = GRAMMAR_VOCAB)]
    pub vocab: usize,
    /// Prompt length for grammar corpora.
    #[arg(long, default_value_t = GRAMMAR_LEN)]
    pub len: usize,
    /// Seed of the grammar's successor table.
    #[arg(long, default_value_t = 7)]
    pub grammar_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub arch: Arch,
    /// Training data; defaults to the reference corpus of the architecture.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Start from this model instead of a fresh initialisation.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FiMapArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Example to score.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Average the map over the first N examples instead.
    #[arg(long)]
    pub calibration: Option<usize>,
    #[arg(long, default_value = "fi")]
    pub measure: Measure,
    /// pixels, params, embed or input-dims.
    #[arg(long)]
    pub target: String,
    /// Also write a P2 graymap of a pixel map.
    #[arg(long)]
    pub emit_pgm: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackCommand {
    /// Mask the top-k pixels of every image.
    Pixels(PixelAttackArgs),
    /// Push the top embedding dimensions against the prediction.
    Embed(EmbedAttackArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct PixelAttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Measures to rank by; `random` is run once per seed.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "fi,jacobian,saliency,random"
    )]
    pub measures: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// First seed of the random arm.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub mask_value: f64,
    /// Use only the first N examples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Write masked versions of the first images here as PPM.
    #[arg(long)]
    pub ppm_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedAttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.001)]
    pub fraction: f64,
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    pub epsilons: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "fi,random")]
    pub measures: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Accuracy,
    Rouge1,
}

#[derive(Debug, Args, Serialize)]
pub struct SparsifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Evaluation data.
    #[arg(long)]
    pub data: PathBuf,
    /// Data the ranking map is averaged over; defaults to --data.
    #[arg(long)]
    pub calibration_data: Option<PathBuf>,
    #[arg(long, default_value_t = CALIBRATION_SAMPLES)]
    pub calibration: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.02,0.03,0.05")]
    pub fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "fi-high,random")]
    pub strategies: Vec<SparsifyStrategy>,
    /// Measure behind the ranked strategy.
    #[arg(long, default_value = "fi")]
    pub measure: Measure,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "accuracy")]
    pub metric: MetricKind,
    /// Continuation length for rouge1.
    #[arg(long, default_value_t = 8)]
    pub gen_length: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SeqFiArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Token prompts.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub prompts: usize,
    /// Fixed-horizon mode (the default).
    #[arg(long, conflicts_with = "gamma")]
    pub horizon: Option<usize>,
    /// Discounted mode with this factor.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Longest discounted horizon; clamped to what the context allows.
    #[arg(long, default_value_t = DEFAULT_L_MAX)]
    pub l_max: usize,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Embedding dimensions perturbed together; defaults to all.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

impl SeqFiArgs {
    pub fn horizon_or_default(&self) -> usize {
        self.horizon.unwrap_or(DEFAULT_HORIZON)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct MergeArgs {
    #[arg(long)]
    pub method: MergeMethod,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Protection ratio.
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long, default_value = "none")]
    pub protect_stage: TiesStage,
    #[arg(long, default_value_t = DEFAULT_TIES_DENSITY)]
    pub ties_density: f64,
    #[arg(long, default_value_t = DEFAULT_DARE_DROP)]
    pub dare_drop: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Precomputed parameter maps of the two fine-tunes.
    #[arg(long, requires = "map_b")]
    pub map_a: Option<PathBuf>,
    #[arg(long, requires = "map_a")]
    pub map_b: Option<PathBuf>,
    /// Calibration data for computing the maps.
    #[arg(long, requires = "calib_b")]
    pub calib_a: Option<PathBuf>,
    #[arg(long, requires = "calib_a")]
    pub calib_b: Option<PathBuf>,
    #[arg(long, default_value_t = CALIBRATION_SAMPLES)]
    pub calibration: usize,
    /// Validation data of each domain.
    #[arg(long, requires = "val_b")]
    pub val_a: Option<PathBuf>,
    #[arg(long, requires = "val_a")]
    pub val_b: Option<PathBuf>,
    /// Search k ∈ {1..10}% and γ ∈ {0.3, 0.4, 0.5, 0.6, 0.9, 1.0}.
    #[arg(long)]
    pub grid_from_paper: bool,
    /// With a grid, also write the best merged model here.
    #[arg(long)]
    pub best_out: Option<PathBuf>,
    /// Merged model, or the score table with a grid.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}
