//! The training loop, experiment configuration and checkpoints.
//!
//! Each optimizer step runs: encode, sample, direction update, residual and
//! prior likelihood, counterfactual construction, losses, update.

mod checkpoint;
mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, NamedTensor, RngState, CHECKPOINT_VERSION};
pub use config::{ExperimentConfig, OptimizerConfig, ScheduleConfig, SEED_ENV};

use crate::error::{Error, Result};
use crate::intervene::{DirectionTracker, InterventionSpec};
use crate::model::{FlexCausal, LossValues, ModelSpec};
use crate::numerics::{Tape, Tensor};
use crate::optim::{lr_schedule, AdamW};
use crate::parallel::Exec;
use crate::scm::CausalGraph;
use crate::synthdata::Dataset;

pub const HISTORY_HEADER: &str = "epoch,recon,kl,sup,cons,hsic,total,lr";

// stream domains, so init, shuffling and per-step draws never overlap
const INIT_DOMAIN: u64 = 0x1417_0000_0000_0001;
const SHUFFLE_DOMAIN: u64 = 0x1417_0000_0000_0002;
const STEP_DOMAIN: u64 = 0x1417_0000_0000_0003;

fn domain_rng(seed: u64, domain: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream(stream);
    rng
}

/// Epoch means of the loss components; `lr` is the rate of the epoch's last step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub sup: f64,
    pub cons: f64,
    pub hsic: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.recon, r.kl, r.sup, r.cons, r.hsic, r.total, r.lr
        );
    }
    s
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub exec: Exec,
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<Checkpoint>,
    /// Stop once this many epochs are complete (the schedule still spans all epochs).
    pub stop_after: Option<usize>,
    /// Keep per-step loss values in the outcome.
    pub record_steps: bool,
    pub on_epoch: Option<Box<dyn FnMut(&EpochRecord) + 'a>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub steps: Vec<LossValues>,
}

/// Graph from the config checked against the dataset's factors and size.
pub fn check_compatible(cfg: &ExperimentConfig, data: &Dataset) -> Result<CausalGraph> {
    let graph = CausalGraph::from_spec(&cfg.graph)?;
    data.label_columns(graph.names())?;
    if data.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "dataset has {} records, fewer than one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    Ok(graph)
}

pub fn model_spec(cfg: &ExperimentConfig, data: &Dataset) -> ModelSpec {
    let graph = CausalGraph::from_spec(&cfg.graph).expect("validated");
    let mut spec = ModelSpec::new(&graph, data.manifest.obs_dim);
    spec.prior = cfg.prior;
    spec.flow_layers = cfg.flow_layers;
    spec
}

pub fn train(cfg: &ExperimentConfig, data: &Dataset, mut opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let graph = check_compatible(cfg, data)?;
    let x_all = data.observations();
    let u_all = data.labels(graph.names())?;
    let (mut model, mut tracker, mut adam, mut rng_state, mut history, mut best_total) = match opts.resume.take() {
        Some(ck) => {
            if ck.config != *cfg {
                return Err(Error::Config("resume checkpoint was written with a different config".into()));
            }
            let model = ck.model()?;
            (model, ck.tracker, ck.optimizer, ck.rng, ck.history, ck.best_total)
        }
        None => {
            let mut init = domain_rng(cfg.seed, INIT_DOMAIN, 0);
            let model = FlexCausal::new(model_spec(cfg, data), &mut init)?;
            let tracker = DirectionTracker::new(&graph, cfg.ema_retention, cfg.top_fraction)?;
            let adam = AdamW::new(&model.store, cfg.optimizer.weight_decay);
            let state = RngState {
                seed: cfg.seed,
                epoch: 0,
                step: 0,
            };
            (model, tracker, adam, state, Vec::new(), None)
        }
    };
    let b = cfg.batch_size;
    let per_epoch = data.len() / b;
    let total_steps = per_epoch * cfg.schedule.epochs;
    let warmup = (cfg.schedule.warmup_fraction * total_steps as f64).round() as usize;
    let last_epoch = opts.stop_after.unwrap_or(cfg.schedule.epochs).min(cfg.schedule.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut steps = Vec::new();
    let [tau_lo, tau_hi] = cfg.tau_range;

    while rng_state.epoch < last_epoch {
        let epoch = rng_state.epoch;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut domain_rng(cfg.seed, SHUFFLE_DOMAIN, epoch as u64));
        let mut sums = LossValues::default();
        let mut lr = 0.0;
        for s in 0..per_epoch {
            let rows = &order[s * b..(s + 1) * b];
            let xb = x_all.select_rows(rows);
            let ub = u_all.select_rows(rows);
            let mut srng = domain_rng(cfg.seed, STEP_DOMAIN, rng_state.step as u64);
            let eps = Tensor::randn(&mut srng, b, graph.total_dim());
            let target = srng.random_range(0..graph.len());
            let tau = tau_lo + (tau_hi - tau_lo) * srng.random::<f64>();

            let mut tape = Tape::with_exec(opts.exec);
            let enc = model.encode_sample(&mut tape, &xb, &eps)?;
            tracker.update(&graph, tape.value(enc.z), &ub)?;
            let spec = InterventionSpec { target, tau };
            let cf = tracker.is_initialized(target).then_some((spec, &tracker));
            let (total, parts) = model.losses(&mut tape, &enc, &eps, &ub, cf, &cfg.loss_weights)?;
            let values = FlexCausal::loss_values(&tape, total, &parts);
            tape.backward(total)?;
            let grads = tape.param_grads();
            if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter group '{}' ({})",
                    model.store.group(*id),
                    model.store.name(*id)
                )));
            }
            lr = lr_schedule(rng_state.step + 1, total_steps, warmup, cfg.optimizer.learning_rate);
            adam.step(&mut model.store, &grads, lr)?;
            rng_state.step += 1;

            sums.recon += values.recon;
            sums.kl += values.kl;
            sums.sup += values.sup;
            sums.cons += values.cons;
            sums.hsic += values.hsic;
            sums.total += values.total;
            if opts.record_steps {
                steps.push(values);
            }
        }
        let n = per_epoch as f64;
        let record = EpochRecord {
            epoch,
            recon: sums.recon / n,
            kl: sums.kl / n,
            sup: sums.sup / n,
            cons: sums.cons / n,
            hsic: sums.hsic / n,
            total: sums.total / n,
            lr,
        };
        history.push(record);
        rng_state.epoch += 1;
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&record);
        }
        if best_total.is_none_or(|b| record.total < b) {
            best_total = Some(record.total);
            best = Some(Checkpoint::capture(
                cfg, &model, &tracker, &adam, rng_state, &history, best_total,
            ));
        }
    }
    let last = Checkpoint::capture(cfg, &model, &tracker, &adam, rng_state, &history, best_total);
    let best = best.unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { last, best, steps })
}

/// Files written by [`run_training`].
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub history: PathBuf,
    pub manifest: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths {
            final_checkpoint: dir.join("checkpoint_final.json"),
            best_checkpoint: dir.join("checkpoint_best.json"),
            history: dir.join("history.csv"),
            manifest: dir.join("run_manifest.json"),
        }
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config: &'a ExperimentConfig,
    dataset: &'a crate::synthdata::DatasetManifest,
    epochs_completed: usize,
    steps_completed: usize,
    best_total: Option<f64>,
}

/// Train and write checkpoints, the loss history and a run manifest into `dir`.
pub fn run_training(cfg: &ExperimentConfig, data: &Dataset, dir: &Path, opts: TrainOptions<'_>) -> Result<RunPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let out = train(cfg, data, opts)?;
    let paths = RunPaths::new(dir);
    out.last.save(&paths.final_checkpoint)?;
    out.best.save(&paths.best_checkpoint)?;
    std::fs::write(&paths.history, history_csv(&out.last.history)).map_err(|e| Error::io(&paths.history, e))?;
    let manifest = RunManifest {
        config: cfg,
        dataset: &data.manifest,
        epochs_completed: out.last.rng.epoch,
        steps_completed: out.last.rng.step,
        best_total: out.last.best_total,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&paths.manifest, e))?;
    std::fs::write(&paths.manifest, text).map_err(|e| Error::io(&paths.manifest, e))?;
    Ok(paths)
}
