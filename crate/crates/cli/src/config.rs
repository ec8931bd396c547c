use std::path::Path;

use serde::{Deserialize, Serialize};

use hytrel::encoder::ModelConfig;
use hytrel::objectives::ObjectiveSettings;
use hytrel::table_io::TruncationLimits;
use hytrel::tasks::{FinetuneConfig, TaskSettings};
use hytrel::training::TrainConfig;

use crate::Failure;

pub const SEED_ENV: &str = "HYTREL_SEED";

/// Everything a run reads, merged from defaults, an optional TOML file and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub workers: usize,
    /// Largest vocabulary built from a corpus, reserved tokens included.
    pub vocab_size: usize,
    pub limits: TruncationLimits,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub objective: ObjectiveSettings,
    pub finetune: FinetuneConfig,
    pub task: TaskSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            workers: 1,
            vocab_size: 4096,
            limits: TruncationLimits::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            objective: ObjectiveSettings::default(),
            finetune: FinetuneConfig::default(),
            task: TaskSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::usage(format!("bad config {}: {e}", path.display())))
    }

    /// Applies the global flags, falls back to the seed variable, and copies
    /// the shared seed and worker count into the per-stage sections.
    pub fn resolve(mut self, seed: Option<u64>, workers: Option<usize>, env_seed: Option<String>) -> Result<Self, Failure> {
        let env_seed = match env_seed {
            Some(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Failure::usage(format!("{SEED_ENV} must be an unsigned integer, got `{s}`")))?,
            ),
            None => None,
        };
        let seed = seed.or(self.seed).or(env_seed).unwrap_or(0);
        self.seed = Some(seed);
        if let Some(w) = workers {
            self.workers = w;
        }
        if self.workers == 0 {
            return Err(Failure::usage("workers must be at least 1".into()));
        }
        self.train.seed = seed;
        self.train.workers = self.workers;
        self.finetune.seed = seed;
        self.finetune.workers = self.workers;
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string(self).map_err(|e| Failure::usage(format!("cannot serialize config: {e}")))
    }
}
