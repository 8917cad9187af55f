//! The experiment configuration document.
//!
//! One JSON object with the sections `task`, `denoiser`, `artifacts`,
//! `head`, `decode` and `bench`. Every section has defaults and rejects
//! unknown keys.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifacts::ArtifactPolicy;
use crate::decode::{DecodeConfig, Strategy};
use crate::denoiser::{Arch, DenoiserTrainConfig};
use crate::error::{Error, Result};
use crate::head::{HeadTrainConfig, JointTrainConfig};
use crate::rng::Seed;
use crate::tasks::{TaskConfig, TaskName, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSettings {
    /// `None` picks [`Arch::small`] sized to the task.
    pub arch: Option<Arch>,
    pub train: DenoiserTrainConfig,
    /// Training instances written by `gen-data`.
    pub n_train: usize,
    /// Seed of the training dataset.
    pub data_seed: Seed,
    /// Checkpoint to use instead of `<out>/denoiser.ckpt.json`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for DenoiserSettings {
    fn default() -> Self {
        Self { arch: None, train: DenoiserTrainConfig::default(), n_train: 2000, data_seed: Seed(1), checkpoint: None }
    }
}

impl DenoiserSettings {
    pub fn arch_for(&self, spec: &TaskSpec) -> Arch {
        self.arch.unwrap_or_else(|| Arch::small(spec.max_len))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtifactSettings {
    pub policy: ArtifactPolicy,
    /// Labeled samples drawn per training instance.
    pub per_instance: usize,
    pub seed: Seed,
}

impl Default for ArtifactSettings {
    fn default() -> Self {
        Self { policy: ArtifactPolicy::Lbc { dt: 0.25 }, per_instance: 6, seed: Seed(5) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// A trained MLP on denoiser features.
    Learned,
    /// The enumeration-backed error probability; needs no training.
    Bayes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSettings {
    pub kind: HeadKind,
    pub train: HeadTrainConfig,
    /// Error-term weights; `train-joint` trains one model per entry.
    pub joint_gammas: Vec<f64>,
    /// Labeled samples per joint-training step.
    pub joint_batch: usize,
    /// Checkpoint to use instead of `<out>/head-<policy>.ckpt.json`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for HeadSettings {
    fn default() -> Self {
        Self { kind: HeadKind::Learned, train: HeadTrainConfig::default(), joint_gammas: vec![0.01, 0.1, 0.5], joint_batch: 16, checkpoint: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub strategies: Vec<Strategy>,
    /// Tokens demasked per step.
    pub ks: Vec<usize>,
    pub n_eval: usize,
    /// Evaluation seeds; each draws its own instances and decoding noise.
    pub seeds: Vec<u64>,
    /// Lower the remask budget to `k * stride - 1` where the configured one
    /// would break the termination guard.
    pub clip_budget: bool,
    /// Episodes per run whose traces are written.
    pub trace_limit: usize,
    /// Record wall-clock time. Off by default so outputs are reproducible.
    pub wall_clock: bool,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Confidence, Strategy::Dsc],
            ks: vec![1, 2, 3, 4],
            n_eval: 500,
            seeds: vec![0],
            clip_budget: true,
            trace_limit: 4,
            wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub task: TaskConfig,
    #[serde(default)]
    pub denoiser: DenoiserSettings,
    #[serde(default)]
    pub artifacts: ArtifactSettings,
    #[serde(default)]
    pub head: HeadSettings,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub bench: BenchSettings,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            task: TaskConfig::new(TaskName::CoinPair),
            denoiser: DenoiserSettings::default(),
            artifacts: ArtifactSettings::default(),
            head: HeadSettings::default(),
            decode: DecodeConfig::default(),
            bench: BenchSettings::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        TaskSpec::from_config(&self.task)?;
        self.artifacts.policy.validate()?;
        if self.bench.n_eval == 0 {
            return Err(Error::InvalidConfig("bench.n_eval must be at least 1".into()));
        }
        if self.bench.ks.contains(&0) {
            return Err(Error::InvalidConfig("bench.ks entries must be at least 1".into()));
        }
        if self.bench.seeds.is_empty() {
            return Err(Error::InvalidConfig("bench.seeds must not be empty".into()));
        }
        if self.denoiser.n_train == 0 {
            return Err(Error::InvalidConfig("denoiser.n_train must be at least 1".into()));
        }
        Ok(())
    }

    /// Replace every seed in the document with one derived from `root`.
    pub fn reseed(&mut self, root: u64) {
        let r = Seed(root);
        self.denoiser.data_seed = r.derive_str("data");
        self.denoiser.train.seed = r.derive_str("denoiser");
        self.artifacts.seed = r.derive_str("artifacts");
        self.head.train.seed = r.derive_str("head");
        self.bench.seeds = vec![root];
    }

    pub fn joint(&self, gamma: f64) -> JointTrainConfig {
        JointTrainConfig {
            gamma,
            head_batch: self.head.joint_batch,
            denoiser: self.denoiser.train,
            ..JointTrainConfig::default()
        }
    }
}
