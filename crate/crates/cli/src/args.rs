use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use perfdiff::denoiser::{DenoiserConfig, TrainConfig};
use perfdiff::metrics::MetricsConfig;
use perfdiff::proxy::{ProxyConfig, ProxyTrainConfig};
use perfdiff::sampler::SampleConfig;
use perfdiff::schedule::ScheduleParams;

/// Expressive piano rendering with a score-conditioned diffusion model,
/// and multi-interpretation evaluation of performances.
///
/// Every flag can also be set in a `--config` file as `key = value`, where
/// the key is the flag name with dashes replaced by underscores. Flags
/// given on the command line win over the file.
#[derive(Parser, Debug)]
#[command(name = "perfdiff", version, arg_required_else_help = true)]
pub struct Cli {
    /// Key-value configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads [default: available cores]. Results are
    /// bit-reproducible for a fixed seed with one worker.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Encode an aligned performance as a p_codec CSV.
    Extract(ExtractArgs),
    /// Decode a p_codec CSV and its score into a MIDI performance.
    Invert(InvertArgs),
    /// Render a score from scratch under perceptual conditions.
    Render(RenderArgs),
    /// Re-render an aligned performance towards new conditions.
    Transfer(TransferArgs),
    /// Compare renderings with human performances of the same scores.
    Evaluate(EvaluateArgs),
    /// Train the diffusion model.
    Train(TrainArgs),
    /// Train the perceptual-feature proxy on piano rolls.
    ProxyTrain(ProxyTrainArgs),
    /// Predict perceptual features of performances with a trained proxy.
    ProxyPredict(ProxyPredictArgs),
    /// Run a seeded experiment grid over guidance weight, transfer depth or
    /// feature scaling.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Score CSV.
    #[arg(long, value_name = "FILE")]
    pub score: PathBuf,
    /// Performance MIDI file.
    #[arg(long, value_name = "FILE")]
    pub perf: PathBuf,
    /// Score-to-performance alignment CSV.
    #[arg(long, value_name = "FILE")]
    pub align: PathBuf,
    /// Output p_codec CSV.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Windowed perceptual features of the performance; needs `--c-codec-out`.
    #[arg(long, value_name = "FILE", requires = "c_codec_out")]
    pub feature_windows: Option<PathBuf>,
    /// Output c_codec CSV broadcast from `--feature-windows`.
    #[arg(long, value_name = "FILE", requires = "feature_windows")]
    pub c_codec_out: Option<PathBuf>,
    /// Output s_codec CSV.
    #[arg(long, value_name = "FILE")]
    pub s_codec_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InvertArgs {
    /// p_codec CSV.
    #[arg(long, value_name = "FILE")]
    pub pcodec: PathBuf,
    /// Score CSV the codec was extracted against.
    #[arg(long, value_name = "FILE")]
    pub score: PathBuf,
    /// Output MIDI file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Also emit notes the codec marks as not performed.
    #[arg(long)]
    pub include_filled: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ConditionArgs {
    /// Per-note perceptual conditions (c_codec CSV).
    #[arg(long, value_name = "FILE", conflicts_with = "features", required_unless_present = "features")]
    pub c_codec: Option<PathBuf>,
    /// Seven comma-separated feature values applied to every note.
    #[arg(long, value_name = "V1,..,V7", value_delimiter = ',')]
    pub features: Option<Vec<f64>>,
    /// Multiply one feature by a factor, e.g. `articulation=0.5`;
    /// repeatable.
    #[arg(long, value_name = "NAME=FACTOR", action = ArgAction::Append)]
    pub scale_feature: Vec<String>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Model checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Score CSV.
    #[arg(long, value_name = "FILE")]
    pub score: PathBuf,
    #[command(flatten)]
    pub conditions: ConditionArgs,
    /// Guidance weight on the unconditional branch (0 = purely conditional).
    #[arg(long, default_value_t = SampleConfig::default().w)]
    pub w: f64,
    /// Base name of the written files [default: score file stem].
    #[arg(long)]
    pub name: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    /// Model checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Score CSV.
    #[arg(long, value_name = "FILE")]
    pub score: PathBuf,
    /// Source performance MIDI file.
    #[arg(long, value_name = "FILE")]
    pub perf: PathBuf,
    /// Alignment of the source performance.
    #[arg(long, value_name = "FILE")]
    pub align: PathBuf,
    #[command(flatten)]
    pub conditions: ConditionArgs,
    /// Noising depth; 0 returns the source, T samples from pure noise.
    #[arg(long)]
    pub t0: usize,
    /// Guidance weight on the unconditional branch.
    #[arg(long, default_value_t = SampleConfig::default().w)]
    pub w: f64,
    /// Base name of the written files [default: performance file stem].
    #[arg(long)]
    pub name: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct MetricArgs {
    /// Monte Carlo draws per KL estimate.
    #[arg(long, default_value_t = MetricsConfig::default().n_mc)]
    pub n_mc: usize,
    /// Fewest notes per onset for a pitch-asynchrony correlation.
    #[arg(long, default_value_t = MetricsConfig::default().min_pitch_cor_notes)]
    pub min_pitch_cor_notes: usize,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// JSON manifest of pieces, each with a `rendered` entry.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["score", "rendered", "rendered_align", "gt_perf", "gt_align", "markings"], required_unless_present = "score")]
    pub manifest: Option<PathBuf>,
    /// Score CSV of a single piece.
    #[arg(long, value_name = "FILE", requires_all = ["rendered", "rendered_align", "gt_perf", "gt_align"])]
    pub score: Option<PathBuf>,
    /// Rendered performance MIDI file.
    #[arg(long, value_name = "FILE")]
    pub rendered: Option<PathBuf>,
    /// Alignment of the rendered performance.
    #[arg(long, value_name = "FILE")]
    pub rendered_align: Option<PathBuf>,
    /// Human performance MIDI file; repeat for each ground truth.
    #[arg(long, value_name = "FILE", action = ArgAction::Append)]
    pub gt_perf: Vec<PathBuf>,
    /// Alignment of each `--gt-perf`, in the same order.
    #[arg(long, value_name = "FILE", action = ArgAction::Append)]
    pub gt_align: Vec<PathBuf>,
    /// Dynamics markings CSV of the single piece.
    #[arg(long, value_name = "FILE")]
    pub markings: Option<PathBuf>,
    /// Piece name in reports [default: score file stem].
    #[arg(long)]
    pub name: Option<String>,
    #[command(flatten)]
    pub metrics: MetricArgs,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Channel width per resolution level.
    #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
    pub channels: Vec<usize>,
    /// Width of the condition embedding.
    #[arg(long, default_value_t = DenoiserConfig::default().cond_embed_dim)]
    pub cond_embed_dim: usize,
    /// Width of the timestep embedding.
    #[arg(long, default_value_t = DenoiserConfig::default().time_embed_dim)]
    pub time_embed_dim: usize,
    /// Upper bound on group-norm groups.
    #[arg(long, default_value_t = DenoiserConfig::default().groups)]
    pub groups: usize,
    /// Self-attention at the coarsest level.
    #[arg(long, action = ArgAction::Set, default_value_t = DenoiserConfig::default().attention)]
    pub attention: bool,
    /// Notes per segment.
    #[arg(long, default_value_t = DenoiserConfig::default().segment_len)]
    pub segment_len: usize,
    /// Diffusion steps T.
    #[arg(long, default_value_t = ScheduleParams::default().steps)]
    pub steps: usize,
    /// Noise variance at the first step.
    #[arg(long, default_value_t = ScheduleParams::default().beta_start)]
    pub beta_start: f64,
    /// Noise variance at the last step.
    #[arg(long, default_value_t = ScheduleParams::default().beta_end)]
    pub beta_end: f64,
}

#[derive(Args, Debug, Clone)]
pub struct OptimArgs {
    /// Adam learning rate.
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub learning_rate: f64,
    /// Weight of the reconstruction loss term.
    #[arg(long, default_value_t = TrainConfig::default().h)]
    pub h: f64,
    /// Condition dropout probability.
    #[arg(long, default_value_t = TrainConfig::default().p_drop)]
    pub p_drop: f64,
    /// Drop score and perceptual conditions with separate draws.
    #[arg(long, action = ArgAction::Set, default_value_t = TrainConfig::default().independent_drop)]
    pub independent_drop: bool,
    /// Cap on the per-step reconstruction weight.
    #[arg(long, default_value_t = TrainConfig::default().recon_weight_cap)]
    pub recon_weight_cap: f64,
    /// Segments per optimizer step.
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    /// Upper bound on training epochs.
    #[arg(long, default_value_t = TrainConfig::default().max_epochs)]
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = TrainConfig::default().patience)]
    pub patience: usize,
    /// Probability of mixing a segment with another performance of it.
    #[arg(long, default_value_t = TrainConfig::default().mixup_prob)]
    pub mixup_prob: f64,
    /// Share of pieces (or segments, with one piece) held out for
    /// validation.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON manifest of training pieces.
    #[arg(long, value_name = "FILE", conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub manifest: Option<PathBuf>,
    /// Train on N segments of the synthetic velocity task instead.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProxyTrainArgs {
    /// JSON manifest of performances with feature targets.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Channel width per stage.
    #[arg(long, value_delimiter = ',', default_value = "16,32")]
    pub proxy_channels: Vec<usize>,
    /// Frames averaged before the first convolution.
    #[arg(long, default_value_t = ProxyConfig::default().time_pool)]
    pub proxy_time_pool: usize,
    /// Upper bound on group-norm groups.
    #[arg(long, default_value_t = ProxyConfig::default().groups)]
    pub proxy_groups: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = ProxyTrainConfig::default().learning_rate)]
    pub proxy_learning_rate: f64,
    /// Training epochs.
    #[arg(long, default_value_t = ProxyTrainConfig::default().epochs)]
    pub proxy_epochs: usize,
    /// Windows per optimizer step.
    #[arg(long, default_value_t = ProxyTrainConfig::default().batch_size)]
    pub proxy_batch_size: usize,
    /// Share of pairs held out for validation (ignored below ten pairs).
    #[arg(long, default_value_t = ProxyTrainConfig::default().val_fraction)]
    pub proxy_val_fraction: f64,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProxyPredictArgs {
    /// Proxy checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Performance MIDI file; repeatable.
    #[arg(long, value_name = "FILE", action = ArgAction::Append, required = true)]
    pub perf: Vec<PathBuf>,
    /// One row per 15 s window instead of one per performance.
    #[arg(long)]
    pub per_window: bool,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Model checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// JSON manifest of pieces with at least two performances each.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Grid to run: `w=0.5,1.2,2,3`, `t0=250,500,750,1000` (also
    /// `t0=T/4,T/2,3T/4,T`) or `scale=0.5,2`.
    #[arg(long, value_name = "KEY=V1,V2,..")]
    pub grid: String,
    /// Guidance weight for the t0 and scale grids.
    #[arg(long, default_value_t = SampleConfig::default().w)]
    pub w: f64,
    /// Proxy checkpoint; adds feature-proximity (t0) or steering (scale)
    /// reports. Required for the scale grid.
    #[arg(long, value_name = "FILE")]
    pub proxy: Option<PathBuf>,
    #[command(flatten)]
    pub metrics: MetricArgs,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}
