use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use revgrpo_core::scenes::DifficultyMix;

#[derive(Debug, Parser)]
#[command(
    name = "revgrpo",
    version,
    about = "Group-revision GRPO on synthetic grounding scenes"
)]
pub struct Cli {
    /// Worker threads for rollouts and evaluation (1 runs fully serial; 0 uses all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scenes dataset.
    GenData(GenDataArgs),
    /// Train a policy and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Export metrics fields as comma-separated columns.
    PlotData(PlotDataArgs),
    /// Train every ablation variant over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Tier {
    Easy,
    Hard,
    Mixed,
}

impl From<Tier> for DifficultyMix {
    fn from(t: Tier) -> Self {
        match t {
            Tier::Easy => DifficultyMix::Easy,
            Tier::Hard => DifficultyMix::Hard,
            Tier::Mixed => DifficultyMix::Mixed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// Master seed of the dataset.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of scenes to generate.
    #[arg(long)]
    pub num_scenes: usize,
    /// Difficulty tier of the scenes.
    #[arg(long, value_enum, default_value_t = Tier::Hard)]
    pub difficulty: Tier,
    /// Output dataset file.
    #[arg(long)]
    pub out: PathBuf,
    /// Run config whose [env] section shapes the scenes (defaults otherwise).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Run config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory, overriding [output].dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Disable the revision round (direct groups only).
    #[arg(long)]
    pub no_revision: bool,
    /// Disable the shaping term of the reward.
    #[arg(long)]
    pub no_consolidation: bool,
    /// Disable advantage post-scaling.
    #[arg(long)]
    pub no_postscale: bool,
    /// Shaping weight, overriding train.omega.
    #[arg(long)]
    pub omega: Option<f64>,
    /// Number of updates, overriding train.steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Training seed, overriding train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Run config whose [env] section the checkpoint must match (defaults otherwise).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report file (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PlotDataArgs {
    /// Metrics stream; repeat to join several runs on step.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    /// Column prefix for each input, in order (defaults to run1, run2, ...).
    #[arg(long)]
    pub label: Vec<String>,
    /// Comma-separated metrics fields.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "step,mean_reward,frac_group_best_iou_above_0.5"
    )]
    pub fields: Vec<String>,
    /// Output CSV file (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    /// Run config shared by all variants.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory receiving one run directory per variant and seed.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of training seeds per variant.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Number of updates, overriding train.steps.
    #[arg(long)]
    pub steps: Option<u64>,
}
