//! Directional counterfactual interventions.
//!
//! Directions `v_k = mu_pos - mu_neg` are EMA estimates of the latent centroid
//! gap between high- and low-label data. An intervention shifts one block along
//! its direction and recomputes descendants with their abducted noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scm::{propagate_blocks, residuals_on_tape, CausalGraph, LatentBlocks, Mechanisms};

pub const DEFAULT_RETENTION: f64 = 0.9;
pub const DEFAULT_TOP_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionTracker {
    pub names: Vec<String>,
    pub mu_pos: Vec<Vec<f64>>,
    pub mu_neg: Vec<Vec<f64>>,
    /// Weight on the old centroid in each EMA step.
    pub retention: f64,
    pub top_fraction: f64,
    pub initialized: Vec<bool>,
}

impl DirectionTracker {
    pub fn new(graph: &CausalGraph, retention: f64, top_fraction: f64) -> Result<Self> {
        if !(retention > 0.0 && retention < 1.0) {
            return Err(Error::Config(format!("EMA retention must be in (0, 1), got {retention}")));
        }
        if !(top_fraction > 0.0 && top_fraction <= 0.5) {
            return Err(Error::Config(format!("top_fraction must be in (0, 0.5], got {top_fraction}")));
        }
        Ok(DirectionTracker {
            names: graph.names().to_vec(),
            mu_pos: graph.dims().iter().map(|&d| vec![0.0; d]).collect(),
            mu_neg: graph.dims().iter().map(|&d| vec![0.0; d]).collect(),
            retention,
            top_fraction,
            initialized: vec![false; graph.len()],
        })
    }

    /// Smallest batch for which top and bottom sets are well defined.
    pub fn min_batch(&self) -> usize {
        (2.0 / self.top_fraction).ceil() as usize
    }

    /// `max(1, floor(B * top_fraction))`.
    pub fn top_count(&self, batch: usize) -> usize {
        ((batch as f64 * self.top_fraction).floor() as usize).max(1)
    }

    /// EMA update from a latent batch `[B, D]` and labels `[B, K]`.
    /// Concepts whose labels are all equal keep their previous state.
    pub fn update(&mut self, graph: &CausalGraph, z: &Tensor, u: &Tensor) -> Result<()> {
        let b = z.rows();
        if u.rows() != b || u.cols() != graph.len() || z.cols() != graph.total_dim() {
            return Err(Error::shape(
                "update_directions",
                format!("latents {:?}, labels {:?} for {} concepts", z.shape(), u.shape(), graph.len()),
            ));
        }
        if b < self.min_batch() {
            return Err(Error::Invalid(format!(
                "direction update needs a batch of at least {}, got {b}",
                self.min_batch()
            )));
        }
        let m = self.top_count(b);
        for k in 0..graph.len() {
            let labels = u.column_values(k);
            if labels.iter().all(|&v| v == labels[0]) {
                continue;
            }
            let mut asc: Vec<usize> = (0..b).collect();
            asc.sort_by(|&i, &j| labels[i].total_cmp(&labels[j]).then(i.cmp(&j)));
            let mut desc: Vec<usize> = (0..b).collect();
            desc.sort_by(|&i, &j| labels[j].total_cmp(&labels[i]).then(i.cmp(&j)));
            let cols = graph.block_cols(k);
            let mean_of = |rows: &[usize]| -> Vec<f64> {
                cols.iter()
                    .map(|&c| rows.iter().map(|&r| z.get(r, c)).sum::<f64>() / rows.len() as f64)
                    .collect()
            };
            let pos = mean_of(&desc[..m]);
            let neg = mean_of(&asc[..m]);
            if self.initialized[k] {
                let rho = self.retention;
                for (old, new) in self.mu_pos[k].iter_mut().zip(&pos) {
                    *old = rho * *old + (1.0 - rho) * new;
                }
                for (old, new) in self.mu_neg[k].iter_mut().zip(&neg) {
                    *old = rho * *old + (1.0 - rho) * new;
                }
            } else {
                self.mu_pos[k] = pos;
                self.mu_neg[k] = neg;
                self.initialized[k] = true;
            }
        }
        Ok(())
    }

    pub fn is_initialized(&self, k: usize) -> bool {
        self.initialized.get(k).copied().unwrap_or(false)
    }

    pub fn direction(&self, k: usize) -> Result<Vec<f64>> {
        if k >= self.initialized.len() {
            return Err(Error::ConceptIndex {
                index: k,
                count: self.initialized.len(),
            });
        }
        if !self.initialized[k] {
            return Err(Error::DirectionUninitialized(self.names[k].clone()));
        }
        Ok(self.mu_pos[k].iter().zip(&self.mu_neg[k]).map(|(p, n)| p - n).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub target: usize,
    pub tau: f64,
}

impl InterventionSpec {
    pub fn validate(&self, graph: &CausalGraph) -> Result<()> {
        if self.target >= graph.len() {
            return Err(Error::ConceptIndex {
                index: self.target,
                count: graph.len(),
            });
        }
        if !self.tau.is_finite() {
            return Err(Error::Invalid(format!("intervention intensity must be finite, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Abduction, action, prediction on a `[B, D]` latent batch:
/// residuals are inferred from `z`, block `k` moves to `z_k + tau v_k`, and
/// descendants are recomputed as `f_j(new parents) + n_j`. Invariant blocks
/// are copied from `z`. With `tau = 0` the input is returned unchanged.
pub fn apply_intervention_on_tape(
    tape: &mut Tape,
    graph: &CausalGraph,
    mech: &dyn Mechanisms,
    z: Var,
    spec: InterventionSpec,
    tracker: &DirectionTracker,
) -> Result<Var> {
    spec.validate(graph)?;
    let v = tracker.direction(spec.target)?;
    if spec.tau == 0.0 {
        return Ok(z);
    }
    let part = graph.partition(spec.target)?;
    let n = residuals_on_tape(tape, graph, mech, z)?;
    let mut fixed: Vec<Option<Var>> = vec![None; graph.len()];
    let zk = tape.select_cols(z, &graph.block_cols(spec.target))?;
    let shift: Vec<f64> = v.iter().map(|x| spec.tau * x).collect();
    let shift = tape.constant(Tensor::row(&shift));
    fixed[spec.target] = Some(tape.add_row(zk, shift)?);
    for &j in &part.invariant_set {
        fixed[j] = Some(tape.select_cols(z, &graph.block_cols(j))?);
    }
    let blocks = propagate_blocks(tape, graph, mech, n, &fixed)?;
    tape.concat_cols(&blocks)
}

pub fn apply_intervention(
    z: &LatentBlocks,
    spec: InterventionSpec,
    tracker: &DirectionTracker,
    mech: &dyn Mechanisms,
    graph: &CausalGraph,
) -> Result<LatentBlocks> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.tensor().clone());
    let zt = apply_intervention_on_tape(&mut tape, graph, mech, zv, spec, tracker)?;
    LatentBlocks::new(tape.value(zt).clone(), graph.dims())
}

/// Decoder and deterministic encoder used by the counterfactual cycle.
pub trait Codec {
    fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var>;
    /// Posterior mean, no sampling noise.
    fn encode_mean(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

#[derive(Debug, Clone, Copy)]
pub struct Counterfactual {
    pub z_tilde: Var,
    pub x_cf: Var,
    pub z_hat: Var,
}

/// `z~ = intervene(z)`, `x_cf = decode(z~)`, `z^ = encode_mean(x_cf)`.
pub fn counterfactual_cycle(
    tape: &mut Tape,
    codec: &dyn Codec,
    graph: &CausalGraph,
    mech: &dyn Mechanisms,
    z: Var,
    spec: InterventionSpec,
    tracker: &DirectionTracker,
) -> Result<Counterfactual> {
    let z_tilde = apply_intervention_on_tape(tape, graph, mech, z, spec, tracker)?;
    let x_cf = codec.decode(tape, z_tilde)?;
    let z_hat = codec.encode_mean(tape, x_cf)?;
    Ok(Counterfactual { z_tilde, x_cf, z_hat })
}
