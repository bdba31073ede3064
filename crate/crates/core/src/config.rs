//! Experiment configuration (JSON, schema in `config.schema.json`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::checkpoint::sha256_hex;
use crate::data::{DatasetSpec, SyntheticKind};
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::pruning::{PruneSchedule, SnapshotPolicy};
use crate::unet::{UNet, UNetConfig};

pub const CONFIG_SCHEMA: &str = include_str!("../config.schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Reported round loss is the mean over this many final iterations.
    pub loss_window: usize,
    /// Retrain the final ticket from `θ_τ ⊙ m` and score it as an extra row.
    pub retrain_final: bool,
    /// Decay of the weight average that becomes the round's trained model
    /// (0 keeps the raw iterate). Warmed up as `min(d, (1 + n) / (10 + n))`.
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
}

fn default_ema_decay() -> f64 {
    0.995
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Generated images per evaluation.
    pub samples: usize,
    /// Reference images taken from the front of the dataset.
    pub reference: usize,
    pub sample_batch: usize,
    /// Trajectory frame spacing for the `sample` command (0 disables).
    pub trajectory_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: UNetConfig,
    pub diffusion: DiffusionConfig,
    pub training: TrainingConfig,
    pub prune: PruneSchedule,
    pub dataset: DatasetSpec,
    pub metrics: MetricsConfig,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Synthetic,
    Mnist,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "mnist" => Ok(Self::Mnist),
            other => Err(Error::InvalidConfig(format!("unknown preset `{other}`"))),
        }
    }
}

impl ExperimentConfig {
    /// Two-gaussians 16x16, T = 100, 2000 iterations per round, batch 64,
    /// p = 20, q = 1, 10 rounds.
    pub fn synthetic() -> Self {
        Self {
            seed: 0,
            model: UNetConfig::default(),
            diffusion: DiffusionConfig::rescaled(100),
            training: TrainingConfig {
                batch_size: 64,
                adam: AdamConfig::default(),
                loss_window: 100,
                retrain_final: true,
                ema_decay: default_ema_decay(),
            },
            prune: PruneSchedule {
                base_ratio_pct: 20.0,
                increment_pct: 1.0,
                target_sparsity: 0.99,
                rewind_fraction: 0.05,
                iterations_per_round: 2000,
                max_rounds: 10,
                snapshot_policy: SnapshotPolicy::FirstRound,
            },
            dataset: DatasetSpec::Synthetic {
                kind: SyntheticKind::TwoGaussians,
                size: 16,
                count: 4096,
            },
            metrics: MetricsConfig {
                samples: 256,
                reference: 256,
                sample_batch: 64,
                trajectory_every: 10,
            },
            output_dir: PathBuf::from("runs/synthetic"),
        }
    }

    /// MNIST downscaled to 16x16, 25 rounds; expects the uncompressed
    /// training images at `data/train-images-idx3-ubyte`.
    pub fn mnist() -> Self {
        let mut c = Self::synthetic();
        c.dataset = DatasetSpec::Idx {
            path: PathBuf::from("data/train-images-idx3-ubyte"),
            downscale: true,
            limit: None,
        };
        c.prune.max_rounds = 25;
        c.prune.iterations_per_round = 4000;
        c.output_dir = PathBuf::from("runs/mnist");
        c
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Synthetic => Self::synthetic(),
            Preset::Mnist => Self::mnist(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let net = UNet::new(self.model)?;
        self.prune.validate(net.module_count())?;
        self.diffusion.schedule()?;
        if let Some(size) = self.dataset.image_size() {
            if size != self.model.image_size {
                return Err(Error::InvalidConfig(format!(
                    "dataset images are {size}x{size} but the model expects {}",
                    self.model.image_size
                )));
            }
        }
        if self.training.batch_size == 0 || self.training.loss_window == 0 {
            return Err(Error::InvalidConfig("batch size and loss window must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.training.ema_decay) {
            return Err(Error::InvalidConfig(format!("ema_decay {} outside [0, 1)", self.training.ema_decay)));
        }
        if self.metrics.samples < 2 || self.metrics.reference < 2 || self.metrics.sample_batch == 0 {
            return Err(Error::InvalidConfig(
                "metrics need >= 2 samples, >= 2 reference images and a positive batch".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// SHA-256 of the compact JSON encoding, with `output_dir` blanked so
    /// that where a run is written does not change its identity.
    pub fn hash(&self) -> String {
        let keyed = Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        sha256_hex(&serde_json::to_vec(&keyed).expect("config serializes"))
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::synthetic()
    }
}
