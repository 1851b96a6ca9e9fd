//! Per-concept masked autoregressive flows for the exogenous noise densities.
//!
//! One layer maps `x -> eps` in a single pass:
//!
//! ```text
//! (m, a_raw) = MADE(x)            // coordinate i sees only x_<i
//! a   = 7 tanh(a_raw / 7)
//! h   = (x - m) exp(-a)
//! eps = h + k tanh(h - c)         // elementwise, k = softplus(r) - softplus(r0) > -0.99
//! ```
//!
//! The elementwise term is strictly increasing because `k > -1`. Without it a
//! one-dimensional stack collapses to a single affine map and cannot
//! represent multimodal noise. Every layer starts as the identity.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tape::softplus;
use crate::numerics::{Linear, ParamId, ParamStore, Tape, Tensor, Var};
use crate::optim::{lr_schedule, AdamW};

pub const FLOW_HIDDEN: usize = 32;
pub const DEFAULT_FLOW_LAYERS: usize = 4;
pub const LOG_SCALE_BOUND: f64 = 7.0;
const SLOPE_FLOOR: f64 = 0.99;

fn identity_slope_raw() -> f64 {
    (SLOPE_FLOOR.exp() - 1.0).ln()
}

/// `k = softplus(r) - softplus(r0)`: exactly 0 at initialization, floor near -0.99.
fn slope_offset() -> f64 {
    softplus(identity_slope_raw())
}

/// Degrees of the hidden units; see [`MafLayer`].
fn hidden_degrees(dim: usize, hidden: usize) -> Vec<usize> {
    (0..hidden)
        .map(|h| if dim > 1 { 1 + h % (dim - 1) } else { 0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MafLayer {
    pub dim: usize,
    pub input: Linear,
    pub output: Linear,
    /// `[dim, hidden]`: input `j` feeds hidden `h` when `j < deg(h)`.
    pub mask_in: Tensor,
    /// `[hidden, 2 dim]`: hidden `h` feeds shift/scale of `i` when `deg(h) <= i`.
    pub mask_out: Tensor,
    pub slope_raw: ParamId,
    pub center: ParamId,
}

impl MafLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        let deg = hidden_degrees(dim, hidden);
        let mut mask_in = Tensor::zeros(dim, hidden);
        let mut mask_out = Tensor::zeros(hidden, 2 * dim);
        for (h, &dh) in deg.iter().enumerate() {
            for j in 0..dim {
                if j < dh {
                    mask_in.set(j, h, 1.0);
                }
            }
            for i in 0..dim {
                if dh <= i && dh > 0 {
                    mask_out.set(h, i, 1.0);
                    mask_out.set(h, dim + i, 1.0);
                }
            }
        }
        MafLayer {
            dim,
            input: Linear::new(store, &format!("{name}.cond0"), dim, hidden, rng),
            output: Linear::zeros(store, &format!("{name}.cond1"), hidden, 2 * dim),
            mask_in,
            mask_out,
            slope_raw: store.add(format!("{name}.slope"), Tensor::filled(1, dim, identity_slope_raw())),
            center: store.add(format!("{name}.center"), Tensor::zeros(1, dim)),
        }
    }

    /// Shift `m` and bounded log-scale `a`, each `[B, dim]`.
    fn conditioner(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let h = self.input.forward_masked(tape, store, x, &self.mask_in)?;
        let h = tape.tanh(h)?;
        let o = self.output.forward_masked(tape, store, h, &self.mask_out)?;
        let m = tape.slice_cols(o, 0, self.dim)?;
        let a = tape.slice_cols(o, self.dim, self.dim)?;
        let a = tape.scale(a, 1.0 / LOG_SCALE_BOUND)?;
        let a = tape.tanh(a)?;
        let a = tape.scale(a, LOG_SCALE_BOUND)?;
        Ok((m, a))
    }

    fn slope_values(&self, store: &ParamStore) -> Vec<f64> {
        store
            .get(self.slope_raw)
            .data()
            .iter()
            .map(|&r| softplus(r) - slope_offset())
            .collect()
    }

    /// `(eps, log|det d eps/dx|)` with the log-det as `[B, 1]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let (m, a) = self.conditioner(tape, store, x)?;
        let centered = tape.sub(x, m)?;
        let na = tape.neg(a)?;
        let inv_scale = tape.exp(na)?;
        let h = tape.mul(centered, inv_scale)?;

        let r = tape.param(store, self.slope_raw);
        let k = tape.softplus(r)?;
        let k = tape.add_scalar(k, -slope_offset())?;
        let c = tape.param(store, self.center);
        let nc = tape.neg(c)?;
        let hc = tape.add_row(h, nc)?;
        let t = tape.tanh(hc)?;
        let kt = tape.mul_row(t, k)?;
        let eps = tape.add(h, kt)?;

        let t2 = tape.square(t)?;
        let sech2 = tape.neg(t2)?;
        let sech2 = tape.add_scalar(sech2, 1.0)?;
        let ks = tape.mul_row(sech2, k)?;
        let deriv = tape.add_scalar(ks, 1.0)?;
        let logd = tape.log(deriv)?;
        let logd = tape.sum_cols(logd)?;
        let sa = tape.sum_cols(a)?;
        let logdet = tape.sub(logd, sa)?;
        Ok((eps, logdet))
    }

    /// Autoregressive inversion, one coordinate per conditioner pass.
    pub fn inverse(&self, store: &ParamStore, eps: &Tensor) -> Result<Tensor> {
        let b = eps.rows();
        let k = self.slope_values(store);
        let c = store.get(self.center).data().to_vec();
        let mut h = eps.clone();
        for r in 0..b {
            for i in 0..self.dim {
                h.set(r, i, solve_monotone(eps.get(r, i), k[i], c[i]));
            }
        }
        let mut x = Tensor::zeros(b, self.dim);
        for i in 0..self.dim {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (m, a) = self.conditioner(&mut tape, store, xv)?;
            let (m, a) = (tape.value(m), tape.value(a));
            for r in 0..b {
                x.set(r, i, h.get(r, i) * a.get(r, i).exp() + m.get(r, i));
            }
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("flow inverse".into()));
        }
        Ok(x)
    }
}

/// Solve `h + k tanh(h - c) = y` for `h`; the root lies within `|k|` of `y`.
fn solve_monotone(y: f64, k: f64, c: f64) -> f64 {
    if k == 0.0 {
        return y;
    }
    let (mut lo, mut hi) = (y - k.abs(), y + k.abs());
    let mut h = y;
    for _ in 0..200 {
        let t = (h - c).tanh();
        let f = h + k * t - y;
        if f == 0.0 {
            return h;
        }
        if f > 0.0 {
            hi = h;
        } else {
            lo = h;
        }
        let step = f / (1.0 + k * (1.0 - t * t));
        let next = h - step;
        h = if next >= lo && next <= hi { next } else { 0.5 * (lo + hi) };
        if step.abs() < 1e-15 || hi - lo < 1e-15 {
            break;
        }
    }
    h
}

/// Layers of one concept with coordinate reversal between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptFlow {
    pub dim: usize,
    pub layers: Vec<MafLayer>,
}

impl ConceptFlow {
    /// Undo a leftover reversal so the identity initialization is exact.
    fn odd_reversals(&self) -> bool {
        self.dim > 1 && self.layers.len() % 2 == 0
    }

    fn reversed(&self) -> Vec<usize> {
        (0..self.dim).rev().collect()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, n: Var) -> Result<(Var, Var)> {
        let rows = tape.shape(n)[0];
        let mut x = n;
        let mut logdet = tape.constant(Tensor::zeros(rows, 1));
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 && self.dim > 1 {
                x = tape.select_cols(x, &self.reversed())?;
            }
            let (e, ld) = layer.forward(tape, store, x)?;
            x = e;
            logdet = tape.add(logdet, ld)?;
        }
        if self.odd_reversals() {
            x = tape.select_cols(x, &self.reversed())?;
        }
        Ok((x, logdet))
    }

    pub fn inverse(&self, store: &ParamStore, eps: &Tensor) -> Result<Tensor> {
        let mut y = eps.clone();
        if self.odd_reversals() {
            y = y.select_cols(&self.reversed());
        }
        for (l, layer) in self.layers.iter().enumerate().rev() {
            y = layer.inverse(store, &y)?;
            if l > 0 && self.dim > 1 {
                y = y.select_cols(&self.reversed());
            }
        }
        Ok(y)
    }

    pub fn log_prob(&self, tape: &mut Tape, store: &ParamStore, n: Var) -> Result<Var> {
        let (eps, logdet) = self.forward(tape, store, n)?;
        let sq = tape.square(eps)?;
        let sq = tape.sum_cols(sq)?;
        let sq = tape.scale(sq, -0.5)?;
        let base = tape.add_scalar(sq, -(self.dim as f64) / 2.0 * (2.0 * PI).ln())?;
        tape.add(base, logdet)
    }
}

/// Flows for every concept, parameters named `flow.k{k}.l{l}.*`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    pub flows: Vec<ConceptFlow>,
}

impl FlowStack {
    pub fn new<R: Rng>(store: &mut ParamStore, dims: &[usize], layers: usize, rng: &mut R) -> Self {
        Self::with_hidden(store, dims, layers, FLOW_HIDDEN, rng)
    }

    pub fn with_hidden<R: Rng>(store: &mut ParamStore, dims: &[usize], layers: usize, hidden: usize, rng: &mut R) -> Self {
        let flows = dims
            .iter()
            .enumerate()
            .map(|(k, &d)| ConceptFlow {
                dim: d,
                layers: (0..layers)
                    .map(|l| MafLayer::new(store, &format!("flow.k{k}.l{l}"), d, hidden, rng))
                    .collect(),
            })
            .collect();
        FlowStack { flows }
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    fn flow(&self, k: usize) -> Result<&ConceptFlow> {
        self.flows.get(k).ok_or(Error::ConceptIndex {
            index: k,
            count: self.flows.len(),
        })
    }

    fn check_input(&self, k: usize, cols: usize) -> Result<&ConceptFlow> {
        let f = self.flow(k)?;
        if cols != f.dim {
            return Err(Error::shape("flow", format!("concept {k} has dim {}, input has {cols}", f.dim)));
        }
        Ok(f)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, k: usize, n: Var) -> Result<(Var, Var)> {
        let cols = tape.shape(n)[1];
        self.check_input(k, cols)?.forward(tape, store, n)
    }

    /// Per-datum `[B, 1]` log-density.
    pub fn log_prob(&self, tape: &mut Tape, store: &ParamStore, k: usize, n: Var) -> Result<Var> {
        let cols = tape.shape(n)[1];
        self.check_input(k, cols)?.log_prob(tape, store, n)
    }

    pub fn forward_values(&self, store: &ParamStore, k: usize, n: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let v = tape.constant(n.clone());
        let (e, ld) = self.forward(&mut tape, store, k, v)?;
        Ok((tape.value(e).clone(), tape.value(ld).data().to_vec()))
    }

    pub fn log_prob_values(&self, store: &ParamStore, k: usize, n: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = tape.constant(n.clone());
        let lp = self.log_prob(&mut tape, store, k, v)?;
        Ok(tape.value(lp).data().to_vec())
    }

    pub fn inverse(&self, store: &ParamStore, k: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_input(k, eps.cols())?.inverse(store, eps)
    }

    /// `count` draws from the learned density of concept `k`.
    pub fn sample<R: Rng>(&self, store: &ParamStore, k: usize, count: usize, rng: &mut R) -> Result<Tensor> {
        if count == 0 {
            return Err(Error::Invalid("sample count must be positive".into()));
        }
        let f = self.flow(k)?;
        let eps = Tensor::randn(rng, count, f.dim);
        f.inverse(store, &eps)
    }

    /// Maximum-likelihood fit of concept `k` to `data` with minibatch AdamW
    /// under the warmup + cosine schedule. Touches only this flow's parameters.
    pub fn fit<R: Rng>(
        &self,
        store: &mut ParamStore,
        k: usize,
        data: &Tensor,
        steps: usize,
        batch: usize,
        lr: f64,
        rng: &mut R,
    ) -> Result<f64> {
        self.check_input(k, data.cols())?;
        let prefix = format!("flow.k{k}.");
        let mut opt = AdamW::new(store, 0.0);
        let mut last = f64::NAN;
        for step in 0..steps {
            let idx: Vec<usize> = (0..batch.min(data.rows()))
                .map(|_| rng.random_range(0..data.rows()))
                .collect();
            let mut tape = Tape::new();
            let x = tape.constant(data.select_rows(&idx));
            let lp = self.log_prob(&mut tape, store, k, x)?;
            let m = tape.mean(lp)?;
            let loss = tape.neg(m)?;
            last = tape.value(loss).item();
            tape.backward(loss)?;
            let grads: Vec<_> = tape
                .param_grads()
                .into_iter()
                .filter(|(id, _)| store.name(*id).starts_with(&prefix))
                .collect();
            opt.step(store, &grads, lr_schedule(step, steps, steps / 10, lr))?;
        }
        Ok(last)
    }
}

/// Which exogenous density the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    #[default]
    Flow,
    /// Fixed `N(0, I)` per block, for the ablation.
    StandardNormal,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExogenousPrior {
    Flow(FlowStack),
    StandardNormal { dims: Vec<usize> },
}

impl ExogenousPrior {
    pub fn new<R: Rng>(kind: PriorKind, store: &mut ParamStore, dims: &[usize], layers: usize, rng: &mut R) -> Self {
        match kind {
            PriorKind::Flow => ExogenousPrior::Flow(FlowStack::new(store, dims, layers, rng)),
            PriorKind::StandardNormal => ExogenousPrior::StandardNormal { dims: dims.to_vec() },
        }
    }

    pub fn kind(&self) -> PriorKind {
        match self {
            ExogenousPrior::Flow(_) => PriorKind::Flow,
            ExogenousPrior::StandardNormal { .. } => PriorKind::StandardNormal,
        }
    }

    /// Per-datum `[B, 1]` log-density of residual block `n` of concept `k`.
    pub fn log_prob(&self, tape: &mut Tape, store: &ParamStore, k: usize, n: Var) -> Result<Var> {
        match self {
            ExogenousPrior::Flow(f) => f.log_prob(tape, store, k, n),
            ExogenousPrior::StandardNormal { dims } => {
                let d = *dims.get(k).ok_or(Error::ConceptIndex {
                    index: k,
                    count: dims.len(),
                })?;
                if tape.shape(n)[1] != d {
                    return Err(Error::shape("prior", format!("concept {k} has dim {d}")));
                }
                let sq = tape.square(n)?;
                let sq = tape.sum_cols(sq)?;
                let sq = tape.scale(sq, -0.5)?;
                tape.add_scalar(sq, -(d as f64) / 2.0 * (2.0 * PI).ln())
            }
        }
    }

    pub fn sample<R: Rng>(&self, store: &ParamStore, k: usize, count: usize, rng: &mut R) -> Result<Tensor> {
        match self {
            ExogenousPrior::Flow(f) => f.sample(store, k, count, rng),
            ExogenousPrior::StandardNormal { dims } => {
                if count == 0 {
                    return Err(Error::Invalid("sample count must be positive".into()));
                }
                let d = *dims.get(k).ok_or(Error::ConceptIndex {
                    index: k,
                    count: dims.len(),
                })?;
                Ok(Tensor::randn(rng, count, d))
            }
        }
    }
}
