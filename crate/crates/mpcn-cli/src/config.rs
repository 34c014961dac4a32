use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mpcn::error::{MpcnError, Result};
use mpcn::netblocks::{desk_config, paper_config, tiny_config, ModelConfig};
use mpcn::trainer::{Ablation, ProtocolConfig};

pub const ALLOWED_SHOTS: [usize; 5] = [0, 1, 5, 10, 25];

/// Everything a run needs, loadable from a TOML file. Command-line flags
/// override file values; the effective config is echoed into the run
/// directory so any run can be replayed from its own artifacts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: String,
    pub dataset: Option<PathBuf>,
    /// Families evaluated as novel categories. Empty means every family the
    /// dataset marks with the novel role.
    pub novel: Vec<String>,
    pub shots: usize,
    pub seed: u64,
    pub batch: usize,
    pub lr: f64,
    pub delta: f64,
    pub gamma: f64,
    pub topk: usize,
    pub tau: f64,
    pub lambda: f64,
    pub memory_size: usize,
    pub test_memory_size: usize,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub iou_threshold: f64,
    pub ablate: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = ProtocolConfig::desk_defaults(7, 5);
        RunConfig {
            model: "desk".into(),
            dataset: None,
            novel: Vec::new(),
            shots: p.shots,
            seed: p.seed,
            batch: p.batch,
            lr: p.lr,
            delta: p.delta,
            gamma: p.gamma,
            topk: p.k,
            tau: p.tau,
            lambda: p.lambda,
            memory_size: p.train_capacity,
            test_memory_size: p.test_capacity,
            epochs: p.base_epochs,
            finetune_epochs: p.finetune_epochs,
            iou_threshold: p.iou_threshold,
            ablate: "none".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| MpcnError::config(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| MpcnError::config(format!("config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_SHOTS.contains(&self.shots) {
            return Err(MpcnError::config(format!(
                "shots must be one of {:?}, got {}",
                ALLOWED_SHOTS, self.shots
            )));
        }
        self.model_config()?;
        self.ablation()?;
        self.protocol()?.validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        match self.model.as_str() {
            "desk" => Ok(desk_config()),
            "paper" => Ok(paper_config()),
            "tiny" => Ok(tiny_config()),
            other => Err(MpcnError::config(format!(
                "unknown model {other:?}; expected desk, paper, or tiny"
            ))),
        }
    }

    pub fn ablation(&self) -> Result<Ablation> {
        Ablation::parse(&self.ablate)
    }

    pub fn protocol(&self) -> Result<ProtocolConfig> {
        Ok(ProtocolConfig {
            batch: self.batch,
            lr: self.lr,
            delta: self.delta,
            gamma: self.gamma,
            k: self.topk,
            tau: self.tau,
            lambda: self.lambda,
            train_capacity: self.memory_size,
            test_capacity: self.test_memory_size,
            base_epochs: self.epochs,
            finetune_epochs: self.finetune_epochs,
            iou_threshold: self.iou_threshold,
            shots: self.shots,
            seed: self.seed,
            ablation: self.ablation()?,
        })
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        self.dataset.as_deref().ok_or_else(|| {
            MpcnError::config("no dataset manifest configured; set dataset= or pass --dataset")
        })
    }
}
