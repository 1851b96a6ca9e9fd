//! Training losses and their weighted total.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowprior::ExogenousPrior;
use crate::numerics::{Linear, ParamStore, Tape, Tensor, Var};
use crate::parallel::Exec;
use crate::scm::{residuals_on_tape, CausalGraph, CausalPartition, Mechanisms};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    /// Outer weight on the consistency term.
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// HSIC weight.
    pub nu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 0.1,
            gamma: 3000.0,
            lambda: 1.0,
            lambda1: 1.0,
            lambda2: 10.0,
            lambda3: 1.0,
            nu: 1.0,
        }
    }
}

impl LossWeights {
    /// Only reconstruction active.
    pub fn recon_only() -> Self {
        LossWeights {
            beta: 0.0,
            gamma: 0.0,
            lambda: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            nu: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("nu", self.nu),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Affine readout `h_k: R^{d_k} -> R` per concept.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionHeads {
    pub heads: Vec<Linear>,
}

impl SupervisionHeads {
    pub fn new<R: Rng>(store: &mut ParamStore, dims: &[usize], rng: &mut R) -> Self {
        SupervisionHeads {
            heads: dims
                .iter()
                .enumerate()
                .map(|(k, &d)| Linear::new(store, &format!("heads.k{k}"), d, 1, rng))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// `[B, K]` readouts of a `[B, D]` latent batch.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, graph: &CausalGraph, z: Var) -> Result<Var> {
        if graph.len() != self.heads.len() {
            return Err(Error::Mismatch(format!(
                "{} heads for {} concepts",
                self.heads.len(),
                graph.len()
            )));
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        for (k, h) in self.heads.iter().enumerate() {
            let zk = tape.select_cols(z, &graph.block_cols(k))?;
            outs.push(h.forward(tape, store, zk)?);
        }
        tape.concat_cols(&outs)
    }

    pub fn readouts(&self, store: &ParamStore, graph: &CausalGraph, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let r = self.forward(&mut tape, store, graph, zv)?;
        Ok(tape.value(r).clone())
    }
}

/// Mean squared error over every element.
pub fn recon_loss(tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
    tape.mse(x, x_hat)
}

/// Per-datum `[B, 1]` prior log-density `sum_k log p_k(z_k - f_k(PA_k))`, and
/// the residual batch. The SCM map has unit Jacobian, so no correction term.
pub fn scm_prior_logprob(
    tape: &mut Tape,
    store: &ParamStore,
    graph: &CausalGraph,
    mech: &dyn Mechanisms,
    prior: &ExogenousPrior,
    z: Var,
) -> Result<(Var, Var)> {
    let n = residuals_on_tape(tape, graph, mech, z)?;
    let mut total: Option<Var> = None;
    for k in 0..graph.len() {
        let nk = tape.select_cols(n, &graph.block_cols(k))?;
        let lp = prior.log_prob(tape, store, k, nk)?;
        total = Some(match total {
            Some(t) => tape.add(t, lp)?,
            None => lp,
        });
    }
    Ok((total.expect("graph has concepts"), n))
}

/// Single-sample Monte-Carlo KL: batch mean of `log q - log p`.
pub fn kl_mc(tape: &mut Tape, log_q: Var, log_p: Var) -> Result<Var> {
    let d = tape.sub(log_q, log_p)?;
    tape.mean(d)
}

/// Batch mean of `sum_k (h_k(z_k) - u_k)^2`.
pub fn sup_loss(tape: &mut Tape, readouts: Var, u: &Tensor) -> Result<Var> {
    let shape = tape.shape(readouts).to_vec();
    if u.shape() != shape.as_slice() {
        return Err(Error::Mismatch(format!(
            "labels {:?} do not match readouts {:?} (one scalar label per concept)",
            u.shape(),
            shape
        )));
    }
    let uv = tape.constant(u.clone());
    let d = tape.sub(readouts, uv)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / shape[0] as f64)
}

/// Inner weights of the consistency term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl From<&LossWeights> for ConsistencyWeights {
    fn from(w: &LossWeights) -> Self {
        ConsistencyWeights {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
        }
    }
}

fn group_sq(tape: &mut Tape, a: Var, b: Var, cols: &[usize]) -> Result<Option<Var>> {
    if cols.is_empty() {
        return Ok(None);
    }
    let sa = tape.select_cols(a, cols)?;
    let sb = tape.select_cols(b, cols)?;
    let d = tape.sub(sa, sb)?;
    let sq = tape.square(d)?;
    Ok(Some(tape.sum(sq)?))
}

/// `l1 |zh_I - zt_I|^2 + l2 sum_D |zh_j - zt_j|^2 + l3 sum_S |zh_j - z_j|^2`, batch mean.
pub fn consistency_loss(
    tape: &mut Tape,
    graph: &CausalGraph,
    z_src: Var,
    z_tilde: Var,
    z_hat: Var,
    part: &CausalPartition,
    w: ConsistencyWeights,
) -> Result<Var> {
    part.validate(graph.len())?;
    let cols = |set: &[usize]| -> Vec<usize> { set.iter().flat_map(|&k| graph.block_cols(k)).collect() };
    let rows = tape.shape(z_src)[0] as f64;
    let groups = [
        (w.lambda1, group_sq(tape, z_hat, z_tilde, &cols(&part.intervention_set()))?),
        (w.lambda2, group_sq(tape, z_hat, z_tilde, &cols(&part.descendant_set))?),
        (w.lambda3, group_sq(tape, z_hat, z_src, &cols(&part.invariant_set))?),
    ];
    let mut total = tape.scalar(0.0);
    for (lam, g) in groups {
        if let Some(g) = g {
            let t = tape.scale(g, lam / rows)?;
            total = tape.add(total, t)?;
        }
    }
    Ok(total)
}

fn median(mut v: Vec<(f64, usize)>) -> (f64, Vec<usize>) {
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = v.len();
    if n % 2 == 1 {
        (v[n / 2].0, vec![v[n / 2].1])
    } else {
        (0.5 * (v[n / 2 - 1].0 + v[n / 2].0), vec![v[n / 2 - 1].1, v[n / 2].1])
    }
}

/// Gaussian Gram matrix with the median-distance bandwidth, on the tape.
fn gram(tape: &mut Tape, a: Var) -> Result<Var> {
    let n = tape.shape(a)[0];
    let d2 = tape.pairwise_sq_dist(a)?;
    let vals = tape.value(d2);
    let pairs: Vec<(f64, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| (vals.get(i, j).max(0.0).sqrt(), i * n + j))
        .collect();
    let (med, idx) = median(pairs);
    let on_tape = idx.iter().all(|&f| vals.data()[f] > 0.0);
    let inv = if med > 0.0 && on_tape {
        // sigma = median distance, kept on the tape
        let picked = tape.pick(d2, &idx)?;
        let dist = tape.sqrt(picked)?;
        let sigma = tape.mean(dist)?;
        let s2 = tape.square(sigma)?;
        let r = tape.recip(s2)?;
        tape.scale(r, -0.5)?
    } else if med > 0.0 {
        tape.scalar(-0.5 / (med * med))
    } else {
        tape.scalar(-0.5)
    };
    let e = tape.mul_scalar(d2, inv)?;
    tape.exp(e)
}

/// Biased HSIC `(1/n^2) tr(K H L H)`, expanded so only sums are needed:
/// `tr(KHLH) = sum(K∘L) - (2/n) (K1)·(L1) + (1'K1)(1'L1)/n^2`.
pub fn hsic_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let n = tape.shape(a)[0];
    if tape.shape(b)[0] != n {
        return Err(Error::shape("hsic", format!("{n} vs {} samples", tape.shape(b)[0])));
    }
    if n < 4 {
        return Err(Error::Invalid(format!("hsic needs at least 4 samples, got {n}")));
    }
    let nf = n as f64;
    let k = gram(tape, a)?;
    let l = gram(tape, b)?;
    let kl = tape.mul(k, l)?;
    let t1 = tape.sum(kl)?;
    let kr = tape.sum_cols(k)?;
    let lr = tape.sum_cols(l)?;
    let krl = tape.mul(kr, lr)?;
    let t2 = tape.sum(krl)?;
    let t2 = tape.scale(t2, -2.0 / nf)?;
    let sk = tape.sum(k)?;
    let sl = tape.sum(l)?;
    let t3 = tape.mul(sk, sl)?;
    let t3 = tape.scale(t3, 1.0 / (nf * nf))?;
    let s = tape.add(t1, t2)?;
    let s = tape.add(s, t3)?;
    tape.scale(s, 1.0 / (nf * nf))
}

pub fn hsic(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let h = hsic_on_tape(&mut tape, av, bv)?;
    Ok(tape.value(h).item())
}

fn gram_values(a: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let g = gram(&mut tape, av)?;
    Ok(tape.value(g).clone())
}

/// `H K H` for a square Gram matrix.
fn center(k: &Tensor) -> Tensor {
    let n = k.rows();
    let row: Vec<f64> = (0..n).map(|i| k.row_slice(i).iter().sum::<f64>() / n as f64).collect();
    let grand = row.iter().sum::<f64>() / n as f64;
    let mut out = k.clone();
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, k.get(i, j) - row[i] - row[j] + grand);
        }
    }
    out
}

/// HSIC summed over all residual block pairs `k < j`.
pub fn hsic_residuals(tape: &mut Tape, graph: &CausalGraph, n: Var) -> Result<Var> {
    let blocks: Vec<Var> = (0..graph.len())
        .map(|k| tape.select_cols(n, &graph.block_cols(k)))
        .collect::<Result<_>>()?;
    let mut total = tape.scalar(0.0);
    for k in 0..blocks.len() {
        for j in k + 1..blocks.len() {
            let h = hsic_on_tape(tape, blocks[k], blocks[j])?;
            total = tape.add(total, h)?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationTest {
    pub statistic: f64,
    /// 95th percentile of the shuffled statistics.
    pub threshold: f64,
    pub null: Vec<f64>,
}

impl PermutationTest {
    pub fn rejects_independence(&self) -> bool {
        self.statistic > self.threshold
    }
}

/// Permutation null for HSIC: row `i` of `b` is shuffled by a permutation drawn
/// from `(seed, i)`, so results do not depend on `exec`.
pub fn hsic_permutation_test(a: &Tensor, b: &Tensor, permutations: usize, seed: u64, exec: Exec) -> Result<PermutationTest> {
    if permutations == 0 {
        return Err(Error::Invalid("permutation count must be positive".into()));
    }
    let statistic = hsic(a, b)?;
    let rows = b.rows();
    // bandwidths are permutation invariant, so the Gram matrices are reused
    let kc = center(&gram_values(a)?);
    let l = gram_values(b)?;
    let scale = 1.0 / (rows * rows) as f64;
    let null: Vec<f64> = exec.map_indexed(permutations, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        let mut idx: Vec<usize> = (0..rows).collect();
        for i in (1..rows).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let mut s = 0.0;
        for i in 0..rows {
            let lrow = l.row_slice(idx[i]);
            let krow = kc.row_slice(i);
            for j in 0..rows {
                s += krow[j] * lrow[idx[j]];
            }
        }
        s * scale
    });
    let mut sorted = null.clone();
    sorted.sort_by(f64::total_cmp);
    // linearly interpolated percentile over positions 0..n-1
    let pos = 0.95 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let threshold = sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]);
    Ok(PermutationTest {
        statistic,
        threshold,
        null,
    })
}

/// Component losses of one batch. `cons` is absent when no direction is ready.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub recon: Var,
    pub kl: Var,
    pub sup: Var,
    pub cons: Option<Var>,
    pub hsic: Var,
}

/// `recon + beta kl + lambda cons + gamma sup + nu hsic`.
pub fn total_loss(tape: &mut Tape, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let mut total = parts.recon;
    let weighted = [
        (w.beta, Some(parts.kl)),
        (w.lambda, parts.cons),
        (w.gamma, Some(parts.sup)),
        (w.nu, Some(parts.hsic)),
    ];
    for (c, v) in weighted {
        if let Some(v) = v {
            if c != 0.0 {
                let t = tape.scale(v, c)?;
                total = tape.add(total, t)?;
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests;
