//! Run configuration: a single JSON document covering model, training,
//! data, and metrics settings. Command-line flags override file values,
//! which override defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gazemoe::data::{SyntheticConfig, DEFAULT_TARGET_SIGMA};
use gazemoe::model::DecoderConfig;
use gazemoe::train::TrainConfig;
use gazemoe::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub model: DecoderConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
    /// Directory for checkpoints, logs, and inference artifacts.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: DecoderConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            metrics: MetricsConfig::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataConfig {
    /// Line-delimited JSON annotations. When absent, a synthetic dataset
    /// is generated instead.
    pub annotations: Option<PathBuf>,
    /// Size of the generated synthetic dataset.
    pub n_synthetic: usize,
    /// In-frame fraction of the synthetic dataset.
    pub class_balance: f64,
    /// Filler-channel noise of the synthetic encoder stand-in.
    pub noise_std: f64,
    /// Gaussian radius of heatmap targets, in heatmap cells.
    pub target_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            annotations: None,
            n_synthetic: 64,
            class_balance: 0.5,
            noise_std: 1.0,
            target_sigma: DEFAULT_TARGET_SIGMA,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MetricsConfig {
    pub auc: bool,
    pub mean_l2: bool,
    pub ap_inout: bool,
    pub spherical: bool,
    /// Worker threads for evaluation.
    pub workers: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            auc: true,
            mean_l2: true,
            ap_inout: true,
            spherical: true,
            workers: 1,
        }
    }
}

impl RunConfig {
    /// Reads and validates a configuration file. Parse failures are
    /// reported as configuration errors so they map to the usage exit code.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::config(format!("bad config file {}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(path) = &self.data.annotations {
            if !path.exists() {
                return Err(Error::config(format!(
                    "annotations file {} does not exist",
                    path.display()
                )));
            }
        }
        if self.data.n_synthetic == 0 {
            return Err(Error::config("n_synthetic must be positive"));
        }
        if !(0.0 < self.data.class_balance && self.data.class_balance < 1.0) {
            return Err(Error::config(format!(
                "class_balance must be in (0, 1), got {}",
                self.data.class_balance
            )));
        }
        if !(self.data.target_sigma > 0.0) {
            return Err(Error::config(format!(
                "target_sigma must be positive, got {}",
                self.data.target_sigma
            )));
        }
        if self.metrics.workers == 0 {
            return Err(Error::config("metrics workers must be positive"));
        }
        Ok(())
    }

    /// Synthetic encoder matching the model's input dimensions.
    pub fn encoder(&self) -> SyntheticConfig {
        SyntheticConfig {
            feature_dim: self.model.feature_dim,
            grid: self.model.grid,
            noise_std: self.data.noise_std,
            seed: self.train.seed,
        }
    }
}
