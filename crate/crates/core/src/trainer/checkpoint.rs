use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::EpochRecord;
use crate::error::{Error, Result};
use crate::intervene::DirectionTracker;
use crate::model::{FlexCausal, ModelSpec};
use crate::numerics::Tensor;
use crate::optim::AdamW;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Position of the run in its deterministic random schedule. Every random draw
/// is a pure function of `(seed, epoch, step)`, so this is the whole RNG state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps completed.
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ExperimentConfig,
    pub model: ModelSpec,
    pub params: Vec<NamedTensor>,
    pub tracker: DirectionTracker,
    pub optimizer: AdamW,
    pub rng: RngState,
    pub history: Vec<EpochRecord>,
    /// Lowest epoch-mean total loss so far.
    pub best_total: Option<f64>,
}

impl Checkpoint {
    pub fn capture(
        config: &ExperimentConfig,
        model: &FlexCausal,
        tracker: &DirectionTracker,
        optimizer: &AdamW,
        rng: RngState,
        history: &[EpochRecord],
        best_total: Option<f64>,
    ) -> Self {
        let params = model
            .store
            .entries()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            model: model.spec.clone(),
            params,
            tracker: tracker.clone(),
            optimizer: optimizer.clone(),
            rng,
            history: history.to_vec(),
            best_total,
        }
    }

    /// Rebuild the model; parameters are restored bit for bit.
    pub fn model(&self) -> Result<FlexCausal> {
        // initial values are overwritten, so the init stream is irrelevant
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = FlexCausal::new(self.model.clone(), &mut rng)?;
        let entries = self
            .params
            .iter()
            .map(|p| Ok((p.name.clone(), Tensor::new(p.shape.clone(), p.data.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        if entries.len() != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                entries.len(),
                model.store.len()
            )));
        }
        model.store.load_named(&entries)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "{}: checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.version
            )));
        }
        Ok(ck)
    }
}
