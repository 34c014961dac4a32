use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "mpcn",
    version,
    about = "Single-view voxel reconstruction with a retrieval-augmented shape prior"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic shape dataset on disk
    GenData(GenDataArgs),
    /// Train the model (both stages unless --stage narrows it)
    Train(TrainArgs),
    /// Evaluate a checkpoint on the novel-category query split
    Eval(EvalArgs),
    /// Plot mean IoU against shot count from run reports
    PlotShots(PlotShotsArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output directory (default: <run root>/dataset-seed<seed>)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// How many shape families to include, from the default list
    #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u8).range(1..=6))]
    pub families: u8,
    /// Shapes per family
    #[arg(long, default_value_t = 100)]
    pub per_family: usize,
    /// Orthographic views rendered per shape
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub views: u8,
    /// Voxel resolution
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn model_name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblateArg {
    NoPrior,
    Average,
    UniformNce,
    NoNce,
    NoFinetune,
}

impl AblateArg {
    pub fn name(self) -> &'static str {
        match self {
            AblateArg::NoPrior => "no-prior",
            AblateArg::Average => "average",
            AblateArg::UniformNce => "uniform-nce",
            AblateArg::NoNce => "no-nce",
            AblateArg::NoFinetune => "no-finetune",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Base,
    Finetune,
    All,
}

impl StageArg {
    pub fn name(self) -> &'static str {
        match self {
            StageArg::Base => "base",
            StageArg::Finetune => "finetune",
            StageArg::All => "all",
        }
    }
}

/// Flags shared by train and eval. Unset flags leave the config file (or
/// default) value in place.
#[derive(Args, Default)]
pub struct OverrideArgs {
    /// TOML run config; the flags below override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model preset
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Dataset manifest path
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Support samples per novel category (0, 1, 5, 10, or 25)
    #[arg(long)]
    pub shots: Option<usize>,
    /// Memory insertion threshold on shape distance
    #[arg(long)]
    pub delta: Option<f64>,
    /// Contrastive shape-weighting sharpness
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Memory slots retrieved per query
    #[arg(long)]
    pub topk: Option<usize>,
    /// Contrastive temperature
    #[arg(long)]
    pub tau: Option<f64>,
    /// Training-stage memory capacity
    #[arg(long)]
    pub memory_size: Option<usize>,
    /// Contrastive loss weight
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Base-stage epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Ablation switch
    #[arg(long, value_enum)]
    pub ablate: Option<AblateArg>,
}

impl OverrideArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(preset) = self.preset {
            cfg.model = preset.model_name().into();
        }
        if let Some(dataset) = &self.dataset {
            cfg.dataset = Some(dataset.clone());
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(shots) = self.shots {
            cfg.shots = shots;
        }
        if let Some(delta) = self.delta {
            cfg.delta = delta;
        }
        if let Some(gamma) = self.gamma {
            cfg.gamma = gamma;
        }
        if let Some(topk) = self.topk {
            cfg.topk = topk;
        }
        if let Some(tau) = self.tau {
            cfg.tau = tau;
        }
        if let Some(memory_size) = self.memory_size {
            cfg.memory_size = memory_size;
        }
        if let Some(lambda) = self.lambda {
            cfg.lambda = lambda;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(batch) = self.batch {
            cfg.batch = batch;
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        if let Some(ablate) = self.ablate {
            cfg.ablate = ablate.name().into();
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: OverrideArgs,
    /// Which stage to run
    #[arg(long, value_enum, default_value_t = StageArg::All)]
    pub stage: StageArg,
    /// Checkpoint to start the finetune stage from
    #[arg(long)]
    pub from: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub overrides: OverrideArgs,
    /// Checkpoint to evaluate
    #[arg(long)]
    pub from: PathBuf,
}

#[derive(Args)]
pub struct PlotShotsArgs {
    /// Report files produced by train or eval runs
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// SVG output path (default: <run root>/shots.svg); the CSV sidecar
    /// lands next to it
    #[arg(long)]
    pub out: Option<PathBuf>,
}
