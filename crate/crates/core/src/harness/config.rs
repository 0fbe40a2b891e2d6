use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::CorpusFormat;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamKind};
use crate::optim::{AdamConfig, LrSchedule};

/// Which parameter roles receive no updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezeFlags {
    pub embedding: bool,
    pub norms: bool,
    pub head: bool,
    pub dense: bool,
    pub low_rank: bool,
    pub sparse: bool,
}

impl FreezeFlags {
    pub fn all() -> Self {
        Self {
            embedding: true,
            norms: true,
            head: true,
            dense: true,
            low_rank: true,
            sparse: true,
        }
    }

    /// Only sparse values are trained.
    pub fn sparse_only() -> Self {
        Self {
            sparse: false,
            ..Self::all()
        }
    }

    /// Only the low-rank and sparse factors are trained.
    pub fn factors_only() -> Self {
        Self {
            low_rank: false,
            sparse: false,
            ..Self::all()
        }
    }

    pub fn is_frozen(&self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::Embedding => self.embedding,
            ParamKind::Norm => self.norms,
            ParamKind::Head => self.head,
            ParamKind::DenseLinear => self.dense,
            ParamKind::LowRankA | ParamKind::LowRankB => self.low_rank,
            ParamKind::SparseValues => self.sparse,
        }
    }
}

fn default_floor() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    /// Defaults to 10% of the steps.
    #[serde(default)]
    pub warmup_steps: Option<u64>,
    #[serde(default = "default_floor")]
    pub floor_frac: f64,
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    /// Separate validation file; otherwise the tail of `train` is held out.
    #[serde(default)]
    pub val: Option<PathBuf>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub format: CorpusFormat,
}

/// Adapter fine-tuning on top of a pretrained checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub from: PathBuf,
    pub rank: usize,
    pub delta: f64,
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: AdamConfig,
    pub schedule: ScheduleConfig,
    /// Sequences per step.
    pub batch_size: usize,
    pub steps: u64,
    /// 0 evaluates only at the end.
    #[serde(default)]
    pub eval_interval: u64,
    /// Caps the validation stream used for evaluation.
    #[serde(default)]
    pub eval_max_tokens: Option<usize>,
    /// Seed of the batch order.
    #[serde(default)]
    pub data_seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub freeze: FreezeFlags,
    #[serde(default)]
    pub finetune: Option<FinetuneConfig>,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.data.train.as_os_str().is_empty() {
            return Err(Error::Config("data.train path is empty".into()));
        }
        if matches!(&self.checkpoint, Some(p) if p.as_os_str().is_empty()) {
            return Err(Error::Config("checkpoint path is empty".into()));
        }
        self.lr_schedule().map(|_| ())
    }

    pub fn lr_schedule(&self) -> Result<LrSchedule> {
        let s = &self.schedule;
        LrSchedule::new(s.peak_lr, s.warmup_steps.unwrap_or(self.steps / 10), self.steps, s.floor_frac)
    }

    /// Applies a command-line `--seed` to both initialization and batch order.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.data_seed = seed;
    }

    /// Resolves relative data and output paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.train);
        if let Some(v) = &mut self.data.val {
            fix(v);
        }
        if let Some(c) = &mut self.checkpoint {
            fix(c);
        }
        if let Some(o) = &mut self.out_dir {
            fix(o);
        }
        if let Some(f) = &mut self.finetune {
            fix(&mut f.from);
        }
    }

    /// Canonical JSON used for hashing and checkpoint embedding.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
