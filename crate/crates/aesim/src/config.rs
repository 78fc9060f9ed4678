//! Experiment configuration: one TOML file drives every pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::GailConfig;
use crate::ltr::{LabelTarget, LossKind, TrainConfig};
use crate::pipeline::DatasetConfig;
use crate::user_gan::UserGanConfig;
use crate::world::OracleConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_items: usize,
    pub n_categories: usize,
    pub discrete_cardinalities: Vec<u32>,
    pub dense_width: usize,
    pub oracle: OracleConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_items: 100_000,
            n_categories: 50,
            discrete_cardinalities: vec![8, 16, 4],
            dense_width: 13,
            oracle: OracleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub max_k: usize,
    pub clip_floor: f64,
    /// Sessions drawn from the training log for probing.
    pub n_sessions: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            max_k: 50,
            clip_floor: 0.1,
            n_sessions: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ndcg_k: usize,
    pub label_target: LabelTarget,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ndcg_k: 50,
            label_target: LabelTarget::Purchase,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackStageConfig {
    /// Expert sessions logged for imitation training.
    pub expert_sessions: usize,
    pub gail: GailConfig,
}

impl Default for FeedbackStageConfig {
    fn default() -> Self {
        FeedbackStageConfig {
            expert_sessions: 2_000,
            gail: GailConfig::default(),
        }
    }
}

/// The whole experiment in one file. Seeds inside sub-configs are derived
/// from the master seed per stage; values present in the file for those
/// fields are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub out_dir: String,
    pub world: WorldConfig,
    pub gan: UserGanConfig,
    pub feedback: FeedbackStageConfig,
    pub data: DatasetConfig,
    pub probe: ProbeConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 0,
            out_dir: "runs/default".into(),
            world: WorldConfig::default(),
            gan: UserGanConfig::default(),
            feedback: FeedbackStageConfig::default(),
            data: DatasetConfig::default(),
            probe: ProbeConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("config {}: {e}", path.display())))?;
        let config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Format(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.world.n_items == 0 || self.world.n_categories == 0 {
            return Err(Error::arg("world must have items and categories"));
        }
        if self.world.n_items < self.world.n_categories {
            return Err(Error::arg("need at least one item per category"));
        }
        self.gan.validate()?;
        self.feedback.gail.validate()?;
        self.data.pipeline.validate()?;
        if self.probe.max_k == 0 {
            return Err(Error::arg("probe max_k must be positive"));
        }
        if !(0.0..=1.0).contains(&self.probe.clip_floor) {
            return Err(Error::arg("probe clip_floor must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Stable hash of the canonical serialized configuration, recorded in
    /// every artifact for provenance.
    pub fn hash(&self) -> Result<String> {
        // The output location is not part of the experiment's identity.
        let mut canonical = self.clone();
        canonical.out_dir = String::new();
        let canon = toml::to_string(&canonical).map_err(|e| Error::Format(e.to_string()))?;
        Ok(format!("{:016x}", fnv1a64(canon.as_bytes())))
    }

    /// Loss-specific training config with seeds and IPS wiring applied.
    pub fn train_config(&self, loss: LossKind, use_ips: bool) -> TrainConfig {
        let mut c = self.train.clone();
        c.loss = loss;
        c.use_ips = use_ips;
        c.seed = crate::rng::derive_seed(
            self.master_seed,
            &format!("train-{}-{}", loss.name(), if use_ips { "ips" } else { "noips" }),
        );
        c
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
