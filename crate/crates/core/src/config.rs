//! Run configuration: one TOML file drives a whole pipeline run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::balance::AdasynConfig;
use crate::complementarity::{Thresholds, DEFAULT_BINS};
use crate::dsp::{BandpassSpec, ViewConfig};
use crate::error::{Error, Result};
use crate::ingest::{SplitSpec, SynthConfig};
use crate::models::ArchScale;
use crate::nn::{LossKind, TrainConfig};
use crate::stats::Metric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SynthConfig,
    /// Class-per-subdirectory dataset; required when `source = "directory"`.
    pub directory: Option<PathBuf>,
    /// Used for image inputs and CSV rows that carry no rate.
    pub sample_rate: f64,
    /// Resampled length of signals read from images.
    pub image_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            synthetic: SynthConfig::default(),
            directory: None,
            sample_rate: 100.0,
            image_len: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub bandpass: BandpassSpec,
    pub normalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { bandpass: BandpassSpec::default(), normalize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalanceConfig {
    pub enabled: bool,
    pub adasyn: AdasynConfig,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self { enabled: true, adasyn: AdasynConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub scale: ArchScale,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scale: ArchScale::default(),
            train: TrainConfig { lr: 1e-3, epochs: 25, batch_size: 32, ..TrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridConfig {
    pub scale: ArchScale,
    pub train: TrainConfig,
    /// Let fusion training update the pretrained trunks.
    pub finetune: bool,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            scale: ArchScale::default(),
            train: TrainConfig {
                lr: 1e-3,
                epochs: 25,
                batch_size: 32,
                loss: LossKind::Complementary { lambda1: 0.1, lambda2: 0.01 },
                ..TrainConfig::default()
            },
            finetune: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsConfig {
    pub oned: ModelConfig,
    pub twod: ModelConfig,
    pub transformer: ModelConfig,
    pub hybrid: HybridConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComplementarityConfig {
    pub thresholds: Thresholds,
    pub bins: usize,
}

impl Default for ComplementarityConfig {
    fn default() -> Self {
        Self { thresholds: Thresholds::default(), bins: DEFAULT_BINS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    pub bootstrap_iters: usize,
    pub metrics: Vec<Metric>,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self { bootstrap_iters: 1000, metrics: Metric::WEIGHTED.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub split: SplitSpec,
    pub views: ViewConfig,
    pub balance: BalanceConfig,
    pub models: ModelsConfig,
    pub complementarity: ComplementarityConfig,
    pub stats: StatsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            split: SplitSpec { train_frac: 0.7, val_frac: 0.15, test_frac: 0.15, stratify: true, ..SplitSpec::default() },
            views: ViewConfig::default(),
            balance: BalanceConfig::default(),
            models: ModelsConfig::default(),
            complementarity: ComplementarityConfig::default(),
            stats: StatsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        match self.data.source {
            DataSource::Synthetic => self.data.synthetic.validate().map_err(cfg_err)?,
            DataSource::Directory => {
                if self.data.directory.is_none() {
                    return Err(Error::Config("data.directory is required for a directory source".into()));
                }
            }
        }
        if !(self.data.sample_rate > 0.0) || self.data.image_len == 0 {
            return Err(Error::Config("data.sample_rate and data.image_len must be positive".into()));
        }
        self.split.validate().map_err(cfg_err)?;
        self.balance.adasyn.validate().map_err(cfg_err)?;
        for m in [&self.models.oned, &self.models.twod, &self.models.transformer] {
            m.scale.validate().map_err(cfg_err)?;
            m.train.validate()?;
        }
        self.models.hybrid.scale.validate().map_err(cfg_err)?;
        self.models.hybrid.train.validate()?;
        self.complementarity.thresholds.validate().map_err(cfg_err)?;
        if self.complementarity.bins < 2 {
            return Err(Error::Config("complementarity.bins must be at least 2".into()));
        }
        if self.stats.metrics.is_empty() {
            return Err(Error::Config("stats.metrics must not be empty".into()));
        }
        if self.stats.bootstrap_iters < crate::stats::MIN_RESAMPLES {
            return Err(Error::Config(format!(
                "stats.bootstrap_iters must be at least {}",
                crate::stats::MIN_RESAMPLES
            )));
        }
        Ok(())
    }
}
