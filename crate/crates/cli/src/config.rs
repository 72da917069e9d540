//! Run configuration: built-in defaults, then a TOML file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use glimpse::training::{OptimizerKind, TrainConfig};

use crate::{Classify, Code, Failure, TrainArgs};

/// Model sizes not fixed by the dataset (vocabulary and feature sizes are).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub embed: usize,
    pub hidden: usize,
    pub attn: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embed: 32,
            hidden: 64,
            attn: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub paths: PathsSection,
    /// Cap on the number of training records used.
    pub limit: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).or_exit(Code::Usage, &format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).or_exit(Code::Usage, &format!("invalid config {}", path.display()))
    }

    /// Applies command-line overrides.
    pub fn apply(&mut self, a: &TrainArgs) -> Result<(), Failure> {
        let t = &mut self.train;
        t.seed = a.seed;
        if let Some(m) = a.mode {
            t.mode = m.into();
        }
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut self.model.embed, a.embed);
        set(&mut self.model.hidden, a.hidden);
        set(&mut self.model.attn, a.attn);
        set(&mut t.max_epochs, a.epochs);
        set(&mut t.patience, a.patience);
        set(&mut t.batch_size, a.batch_size);
        set(&mut t.hard.sample_count, a.samples);
        if let Some(name) = &a.optimizer {
            t.optimizer.kind = match name.as_str() {
                "rmsprop" => OptimizerKind::Rmsprop,
                "adam" => OptimizerKind::Adam,
                other => {
                    return Err(Failure::new(
                        Code::Usage,
                        anyhow::anyhow!("unknown optimizer `{other}` (expected rmsprop or adam)"),
                    ))
                }
            };
        }
        if let Some(v) = a.lr {
            t.optimizer.learning_rate = v;
        }
        if let Some(v) = a.lambda_penalty {
            t.soft.lambda_penalty = v;
        }
        if let Some(v) = a.lambda_r {
            t.hard.lambda_r = v;
        }
        if let Some(v) = a.lambda_e {
            t.hard.lambda_e = v;
        }
        if let Some(v) = a.dropout {
            t.soft.dropout_rate = v;
            t.hard.dropout_rate = v;
        }
        if a.time_limit.is_some() {
            t.time_limit_secs = a.time_limit;
        }
        if a.data.is_some() {
            self.paths.data = a.data.clone();
        }
        if a.out_dir.is_some() {
            self.paths.out_dir = a.out_dir.clone();
        }
        if a.limit.is_some() {
            self.limit = a.limit;
        }
        if self.model.embed == 0 || self.model.hidden == 0 || self.model.attn == 0 {
            return Err(Failure::new(
                Code::Usage,
                anyhow::anyhow!("model sizes must be at least 1"),
            ));
        }
        self.train
            .validate()
            .or_exit(Code::Usage, "invalid training configuration")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serialises")
    }
}
