//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use colln_core::attention::HeadAggregation;
use colln_core::model::TraceLevel;
use colln_core::pruning::{
    KeepRule, Method, DEFAULT_KEEP_RATE, DEFAULT_NORM_ORDER, DEFAULT_RESCUE_RATIO,
};

#[derive(Debug, Parser)]
#[command(
    name = "colln",
    version,
    about = "Vision Transformer inference with Col-Ln token pruning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the randomized entropy/norm property suite.
    Verify(VerifyArgs),
    /// Report multiply-accumulate counts for a model and pruning schedule.
    Flops(FlopsArgs),
    /// Pruned inference on one image, with logits, trace CSV and masks.
    Prune(PruneArgs),
    /// Per-layer [CLS] and Col-Ln heatmaps with a norm-order sweep.
    Scores(ScoresArgs),
    /// Compare metrics, schedules and keep rates over a directory of images.
    Compare(CompareArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
    /// Write the tiny preset weights and its sample image.
    TinyPreset(TinyPresetArgs),
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Random matrices per property.
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    /// Largest patch count N (smallest is 4).
    #[arg(long, default_value_t = 64)]
    pub max_n: usize,
    /// Norm orders, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    pub norms: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where failing matrices are written.
    #[arg(long, default_value = ".")]
    pub witness_dir: PathBuf,
}

/// Exactly one keep rule; the keep rate applies when none is given.
#[derive(Debug, Clone, Default, Args)]
#[group(multiple = false)]
pub struct KeepArgs {
    /// Fraction of live patches kept at each scheduled layer [default: 0.7].
    #[arg(long)]
    pub keep_rate: Option<f64>,
    /// Patches removed at each scheduled layer.
    #[arg(long)]
    pub prune_count: Option<usize>,
    /// Patches kept at each scheduled layer.
    #[arg(long)]
    pub keep_count: Option<usize>,
}

impl KeepArgs {
    pub fn rule(&self) -> KeepRule {
        match (self.keep_rate, self.prune_count, self.keep_count) {
            (_, Some(p), _) => KeepRule::PruneCount(p),
            (_, _, Some(k)) => KeepRule::KeepCount(k),
            (r, _, _) => KeepRule::KeepRate(r.unwrap_or(DEFAULT_KEEP_RATE)),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct FlopsArgs {
    /// vit-s16, vit-b16, vit-l16 or tiny.
    #[arg(long, default_value = "vit-s16")]
    pub model: String,
    /// Pruning layers: a comma list, `early` (layers 0-5), `all`, or empty.
    #[arg(long, default_value = "")]
    pub schedule: String,
    #[command(flatten)]
    pub keep: KeepArgs,
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct ModelArgs {
    /// VITW weights file.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Built-in architecture with seeded random weights.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    Mean,
    Max,
}

impl From<AggregationArg> for HeadAggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Mean => HeadAggregation::Mean,
            AggregationArg::Max => HeadAggregation::Max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TraceArg {
    None,
    Decisions,
    Full,
}

impl From<TraceArg> for TraceLevel {
    fn from(t: TraceArg) -> Self {
        match t {
            TraceArg::None => TraceLevel::None,
            TraceArg::Decisions => TraceLevel::Decisions,
            TraceArg::Full => TraceLevel::Full,
        }
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: colln_core::Error| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct PruneFlags {
    /// colln, cls, random or correcting.
    #[arg(long, default_value = "colln", value_parser = parse_method)]
    pub metric: Method,
    /// Norm order of the Col-Ln score.
    #[arg(long, default_value_t = DEFAULT_NORM_ORDER)]
    pub n: f64,
    /// Pruning layers: a comma list, `early` (layers 0-5), `all`, or empty.
    #[arg(long, default_value = "")]
    pub schedule: String,
    #[command(flatten)]
    pub keep: KeepArgs,
    /// Share of the budget given to Col-Ln under `correcting`.
    #[arg(long, default_value_t = DEFAULT_RESCUE_RATIO)]
    pub rescue_ratio: f64,
    /// Seed of the random metric.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// How attention heads are combined before scoring.
    #[arg(long, value_enum, default_value = "mean")]
    pub aggregation: AggregationArg,
}

#[derive(Debug, Clone, Args)]
pub struct PruneArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Binary PPM (P6) at the model resolution.
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub flags: PruneFlags,
    /// Per-layer state to record.
    #[arg(long, value_enum, default_value = "decisions")]
    pub trace: TraceArg,
    /// Also write a score heatmap for every pruning layer.
    #[arg(long)]
    pub heatmaps: bool,
    /// Pixels per patch in rendered images [default: the patch size].
    #[arg(long)]
    pub upscale: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ScoresArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Binary PPM (P6) at the model resolution.
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub flags: PruneFlags,
    /// Norm orders of the Col-Ln sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub norms: Vec<f64>,
    /// Pixels per patch in rendered images [default: the patch size].
    #[arg(long)]
    pub upscale: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory of `.ppm` images.
    #[arg(long)]
    pub image_dir: PathBuf,
    /// Metrics to compare, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "colln,cls,random", value_parser = parse_method)]
    pub metrics: Vec<Method>,
    /// Norm orders for colln and correcting, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub norms: Vec<f64>,
    /// Schedules separated by `;`, each as accepted by --schedule.
    #[arg(long, default_value = "0,3,6")]
    pub schedules: String,
    /// Keep rates, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.7")]
    pub keep_rates: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_RESCUE_RATIO)]
    pub rescue_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "mean")]
    pub aggregation: AggregationArg,
    /// `file,label` lines; enables the accuracy column.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Report CSV; the manifest is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// A manifest written by prune, scores, compare or tiny-preset.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TinyPresetArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
}
