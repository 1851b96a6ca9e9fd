use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowprior::{PriorKind, DEFAULT_FLOW_LAYERS};
use crate::intervene::{DEFAULT_RETENTION, DEFAULT_TOP_FRACTION};
use crate::objectives::LossWeights;
use crate::scm::{CausalGraph, GraphSpec};
use crate::synthdata::DataConfig;

pub const SEED_ENV: &str = "FLEXCAUSAL_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub warmup_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs: 100,
            warmup_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// JSON Lines dataset; relative paths resolve against the config file.
    pub dataset: PathBuf,
    /// Generation settings used by `gen-data`.
    #[serde(default)]
    pub data: DataConfig,
    pub graph: GraphSpec,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_flow_layers")]
    pub flow_layers: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_retention")]
    pub ema_retention: f64,
    #[serde(default = "default_top_fraction")]
    pub top_fraction: f64,
    #[serde(default = "default_tau_range")]
    pub tau_range: [f64; 2],
    #[serde(default)]
    pub prior: PriorKind,
}

fn default_batch() -> usize {
    64
}
fn default_flow_layers() -> usize {
    DEFAULT_FLOW_LAYERS
}
fn default_retention() -> f64 {
    DEFAULT_RETENTION
}
fn default_top_fraction() -> f64 {
    DEFAULT_TOP_FRACTION
}
fn default_tau_range() -> [f64; 2] {
    [-1.0, 1.0]
}

impl ExperimentConfig {
    /// Filter-lite defaults with `d_k = block_dim`.
    pub fn filter(dataset: impl Into<PathBuf>, block_dim: usize) -> Self {
        ExperimentConfig {
            dataset: dataset.into(),
            data: DataConfig::desk(),
            graph: CausalGraph::filter(block_dim).to_spec(),
            loss_weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            batch_size: default_batch(),
            flow_layers: DEFAULT_FLOW_LAYERS,
            seed: 0,
            ema_retention: DEFAULT_RETENTION,
            top_fraction: DEFAULT_TOP_FRACTION,
            tau_range: default_tau_range(),
            prior: PriorKind::Flow,
        }
    }

    /// Parse, resolve the dataset path, apply the seed override, validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.dataset.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset = dir.join(&cfg.dataset);
            }
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        self.override_seed(std::env::var(SEED_ENV).ok().as_deref())
    }

    pub fn override_seed(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        CausalGraph::from_spec(&self.graph)?;
        self.loss_weights.validate()?;
        let o = &self.optimizer;
        if !(o.learning_rate.is_finite() && o.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", o.learning_rate)));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", o.weight_decay)));
        }
        if self.schedule.epochs == 0 {
            return Err(Error::Config("schedule.epochs must be at least 1".into()));
        }
        let wf = self.schedule.warmup_fraction;
        if !(0.0..1.0).contains(&wf) {
            return Err(Error::Config(format!("warmup_fraction must be in [0, 1), got {wf}")));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 0.5) {
            return Err(Error::Config(format!("top_fraction must be in (0, 0.5], got {}", self.top_fraction)));
        }
        let min_batch = (2.0 / self.top_fraction).ceil() as usize;
        if self.batch_size < min_batch {
            return Err(Error::Config(format!(
                "batch_size {} is below 2/top_fraction = {min_batch}",
                self.batch_size
            )));
        }
        if !(self.ema_retention > 0.0 && self.ema_retention < 1.0) {
            return Err(Error::Config(format!("ema_retention must be in (0, 1), got {}", self.ema_retention)));
        }
        let [lo, hi] = self.tau_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("tau_range must be finite with lo <= hi, got [{lo}, {hi}]")));
        }
        if self.prior == PriorKind::Flow && self.flow_layers == 0 {
            return Err(Error::Config("flow prior needs flow_layers >= 1".into()));
        }
        Ok(())
    }
}
