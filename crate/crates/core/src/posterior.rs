//! Block-diagonal Gaussian posterior `q(z|x)`.
//!
//! Every concept block `k` has its own mean and lower-triangular Cholesky
//! factor, so dimensions within a block are coupled and blocks are
//! independent. On the tape the factors of a batch are kept flattened as a
//! `[B, sum d_k^2]` matrix in row-major block order, with the upper triangle
//! held at zero.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::tape::softplus;
use crate::numerics::{Activation, Linear, Mlp, ParamStore, Tape, Tensor, Var};

pub const DIAG_FLOOR: f64 = 1e-4;
pub const ENCODER_HIDDEN: usize = 128;

/// Index bookkeeping shared by the tape and value paths.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    chol_offsets: Vec<usize>,
    total: usize,
    chol_total: usize,
    diag_idx: Vec<usize>,
    diag_mask: Tensor,
    lower_mask: Tensor,
    /// `[chol_total, total]`: sums row `i` of each factor into latent column `i`.
    group: Tensor,
}

impl BlockLayout {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Invalid(format!("block dims must be nonempty and positive, got {dims:?}")));
        }
        let mut offsets = Vec::with_capacity(dims.len());
        let mut chol_offsets = Vec::with_capacity(dims.len());
        let (mut total, mut chol_total) = (0, 0);
        for &d in dims {
            offsets.push(total);
            chol_offsets.push(chol_total);
            total += d;
            chol_total += d * d;
        }
        let mut diag_mask = vec![0.0; chol_total];
        let mut lower_mask = vec![0.0; chol_total];
        let mut diag_idx = Vec::with_capacity(total);
        let mut group = Tensor::zeros(chol_total, total);
        for (k, &d) in dims.iter().enumerate() {
            for i in 0..d {
                for j in 0..d {
                    let c = chol_offsets[k] + i * d + j;
                    if i == j {
                        diag_mask[c] = 1.0;
                        diag_idx.push(c);
                    } else if j < i {
                        lower_mask[c] = 1.0;
                    }
                    group.set(c, offsets[k] + i, 1.0);
                }
            }
        }
        Ok(BlockLayout {
            dims: dims.to_vec(),
            offsets,
            chol_offsets,
            total,
            chol_total,
            diag_idx,
            diag_mask: Tensor::row(&diag_mask),
            lower_mask: Tensor::row(&lower_mask),
            group,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn total_dim(&self) -> usize {
        self.total
    }

    pub fn chol_dim(&self) -> usize {
        self.chol_total
    }

    pub fn offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    pub fn chol_offset(&self, k: usize) -> usize {
        self.chol_offsets[k]
    }

    /// `[B, total]` noise for `eps` where factor column `(k, i, j)` reads `eps_(k, j)`.
    fn spread_eps(&self, eps: &Tensor) -> Tensor {
        let b = eps.rows();
        let mut out = Tensor::zeros(b, self.chol_total);
        for r in 0..b {
            for (k, &d) in self.dims.iter().enumerate() {
                for i in 0..d {
                    for j in 0..=i {
                        let c = self.chol_offsets[k] + i * d + j;
                        out.set(r, c, eps.get(r, self.offsets[k] + j));
                    }
                }
            }
        }
        out
    }

    fn check_rows(&self, op: &'static str, t: &Tensor, cols: usize) -> Result<()> {
        if !t.is_matrix() || t.cols() != cols {
            return Err(Error::shape(op, format!("expected [B, {cols}], got {:?}", t.shape())));
        }
        Ok(())
    }
}

/// Single-datum posterior with explicit blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGaussian {
    pub mu: Vec<Vec<f64>>,
    pub chol: Vec<Tensor>,
}

impl BlockGaussian {
    /// From raw encoder output: means `[D]` and raw factors `[sum d_k^2]`.
    pub fn from_raw(layout: &BlockLayout, mu: &[f64], raw: &[f64]) -> Result<Self> {
        if mu.len() != layout.total || raw.len() != layout.chol_total {
            return Err(Error::shape(
                "BlockGaussian::from_raw",
                format!(
                    "means {} and raw {} for layout {} / {}",
                    mu.len(),
                    raw.len(),
                    layout.total,
                    layout.chol_total
                ),
            ));
        }
        let mut mus = Vec::new();
        let mut chol = Vec::new();
        for (k, &d) in layout.dims.iter().enumerate() {
            let o = layout.offsets[k];
            mus.push(mu[o..o + d].to_vec());
            let c = layout.chol_offsets[k];
            let v = Tensor::matrix(d, d, raw[c..c + d * d].to_vec())?;
            chol.push(build_cholesky(&v)?);
        }
        Ok(BlockGaussian { mu: mus, chol })
    }

    pub fn dims(&self) -> Vec<usize> {
        self.mu.iter().map(Vec::len).collect()
    }

    /// `z_k = mu_k + L_k eps_k`.
    pub fn sample(&self, eps: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if eps.len() != self.mu.len() || eps.iter().zip(&self.mu).any(|(e, m)| e.len() != m.len()) {
            return Err(Error::shape("BlockGaussian::sample", "noise blocks do not match dims"));
        }
        Ok(self
            .mu
            .iter()
            .zip(&self.chol)
            .zip(eps)
            .map(|((m, l), e)| {
                (0..m.len())
                    .map(|i| m[i] + (0..=i).map(|j| l.get(i, j) * e[j]).sum::<f64>())
                    .collect()
            })
            .collect())
    }

    /// Reparameterized log-density of the sample produced by `eps`.
    pub fn log_density(&self, eps: &[Vec<f64>]) -> f64 {
        self.chol
            .iter()
            .zip(eps)
            .map(|(l, e)| {
                let d = e.len();
                let logdiag: f64 = (0..d).map(|i| l.get(i, i).ln()).sum();
                let sq: f64 = e.iter().map(|v| v * v).sum();
                -(d as f64) / 2.0 * (2.0 * PI).ln() - logdiag - 0.5 * sq
            })
            .sum()
    }
}

/// `L = strict tril(V) + diag(softplus(diag V) + floor)`.
pub fn build_cholesky(v: &Tensor) -> Result<Tensor> {
    if !v.is_matrix() || v.rows() != v.cols() {
        return Err(Error::shape("build_cholesky", format!("expected square, got {:?}", v.shape())));
    }
    let d = v.rows();
    let mut l = Tensor::zeros(d, d);
    for i in 0..d {
        for j in 0..i {
            l.set(i, j, v.get(i, j));
        }
        l.set(i, i, softplus(v.get(i, i)) + DIAG_FLOOR);
    }
    Ok(l)
}

/// Posterior parameters of a batch on the tape.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorVars {
    /// `[B, D]`
    pub mu: Var,
    /// `[B, sum d_k^2]`, rectified and masked.
    pub chol: Var,
}

/// Batched [`build_cholesky`] over flattened raw factors.
pub fn build_cholesky_on_tape(tape: &mut Tape, layout: &BlockLayout, raw: Var) -> Result<Var> {
    if tape.shape(raw).len() != 2 || tape.shape(raw)[1] != layout.chol_total {
        return Err(Error::shape(
            "build_cholesky_on_tape",
            format!("expected [B, {}], got {:?}", layout.chol_total, tape.shape(raw)),
        ));
    }
    let lower = tape.constant(layout.lower_mask.clone());
    let diag = tape.constant(layout.diag_mask.clone());
    let off = tape.mul_row(raw, lower)?;
    let sp = tape.softplus(raw)?;
    let sp = tape.add_scalar(sp, DIAG_FLOOR)?;
    let on = tape.mul_row(sp, diag)?;
    tape.add(off, on)
}

/// `z = mu + L eps` for every datum.
pub fn sample_on_tape(tape: &mut Tape, layout: &BlockLayout, post: PosteriorVars, eps: &Tensor) -> Result<Var> {
    layout.check_rows("sample", eps, layout.total)?;
    let spread = tape.constant(layout.spread_eps(eps));
    let prod = tape.mul(post.chol, spread)?;
    let group = tape.constant(layout.group.clone());
    let shift = tape.matmul(prod, group)?;
    tape.add(post.mu, shift)
}

/// Per-datum `[B, 1]` log-density of the samples produced by `eps`.
pub fn log_density_on_tape(tape: &mut Tape, layout: &BlockLayout, post: PosteriorVars, eps: &Tensor) -> Result<Var> {
    layout.check_rows("log_density", eps, layout.total)?;
    let b = eps.rows();
    let base = -(layout.total as f64) / 2.0 * (2.0 * PI).ln();
    let consts: Vec<f64> = (0..b)
        .map(|r| base - 0.5 * eps.row_slice(r).iter().map(|v| v * v).sum::<f64>())
        .collect();
    let diag = tape.select_cols(post.chol, &layout.diag_idx)?;
    let logd = tape.log(diag)?;
    let s = tape.sum_cols(logd)?;
    let c = tape.constant(Tensor::column(&consts));
    tape.sub(c, s)
}

/// Observation encoder: leaky-ReLU backbone with mean and Cholesky heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderNet {
    pub backbone: Mlp,
    pub mean_head: Linear,
    pub chol_head: Linear,
    pub layout: BlockLayout,
}

impl EncoderNet {
    pub fn new<R: Rng>(store: &mut ParamStore, obs_dim: usize, hidden: usize, dims: &[usize], rng: &mut R) -> Result<Self> {
        let layout = BlockLayout::new(dims)?;
        let backbone = Mlp::new(
            store,
            "encoder.backbone",
            &[obs_dim, hidden, hidden, hidden],
            Activation::LeakyRelu,
            false,
            rng,
        );
        let mean_head = Linear::new(store, "encoder.mean", hidden, layout.total, rng);
        let chol_head = Linear::new(store, "encoder.chol", hidden, layout.chol_total, rng);
        Ok(EncoderNet {
            backbone,
            mean_head,
            chol_head,
            layout,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<PosteriorVars> {
        let h = self.backbone.forward(tape, store, x)?;
        let h = Activation::LeakyRelu.apply(tape, h)?;
        let mu = self.mean_head.forward(tape, store, h)?;
        let raw = self.chol_head.forward(tape, store, h)?;
        let chol = build_cholesky_on_tape(tape, &self.layout, raw)?;
        Ok(PosteriorVars { mu, chol })
    }

    /// Posterior mean only; the Cholesky head is not evaluated.
    pub fn mean_on_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.backbone.forward(tape, store, x)?;
        let h = Activation::LeakyRelu.apply(tape, h)?;
        self.mean_head.forward(tape, store, h)
    }

    /// Posterior means of a batch, off the gradient path.
    pub fn encode_mean(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mu = self.mean_on_tape(&mut tape, store, xv)?;
        Ok(tape.value(mu).clone())
    }
}

#[cfg(test)]
mod tests;
