//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is always a valid
//! topological order and `backward` is a single reverse sweep.

use std::collections::HashMap;
use std::rc::Rc;

use super::kernels;
use super::nn::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::parallel::Exec;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SelectCols(Var, Rc<[usize]>),
    Pick(Var, Rc<[usize]>),
    PairwiseSqDist(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records tensor operations for a single forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    exec: Exec,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn require_matrix(op: &'static str, a: &Tensor) -> Result<()> {
    if !a.is_matrix() {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", a.shape())));
    }
    Ok(())
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Bind a parameter from `store`, registering it on first use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    /// Gradients of every bound parameter, keyed by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{op:?}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, op, &[a])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("matmul", ta)?;
        require_matrix("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = kernels::matmul(self.exec, ta.data(), tb.data(), m, k, n);
        let value = Tensor::matrix(m, n, data)?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        row: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        require_matrix(name, tx)?;
        if tr.shape() != [1, tx.cols()] {
            return Err(Error::shape(
                name,
                format!("row {:?} does not broadcast over {:?}", tr.shape(), tx.shape()),
            ));
        }
        let c = tx.cols();
        let r = tr.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, r[i % c]))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(value, op, &[x, row])
    }

    /// `x + bias` where `bias` is a `[1, cols]` row repeated over the rows of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, bias, Op::AddRow(x, bias), |a, b| a + b)
    }

    /// Column-wise scaling of `x` by a `[1, cols]` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, row, Op::MulRow(x, row), |a, b| a * b)
    }

    /// Multiply every entry of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(Error::shape("mul_scalar", format!("{:?} is not a scalar", ts.shape())));
        }
        let sv = ts.item();
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * sv).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(value, Op::MulScalar(x, s), &[x, s])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::AddConst(x), |v| v + c)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().contains(&0.0) {
            return Err(Error::Domain {
                op: "recip",
                detail: "zero input".into(),
            });
        }
        self.unary(x, Op::Recip(x), |v| 1.0 / v)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Per-row sums: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        require_matrix("sum_cols", t)?;
        let data: Vec<f64> = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let value = Tensor::matrix(t.rows(), 1, data)?;
        self.push(value, Op::SumCols(x), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            require_matrix("concat_cols", t)?;
            if t.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts {} vs {}", rows, t.rows()),
                ));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn select_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        require_matrix("select_cols", t)?;
        if idx.is_empty() {
            return Err(Error::shape("select_cols", "empty selection"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.cols()) {
            return Err(Error::shape(
                "select_cols",
                format!("column {bad} out of range for {:?}", t.shape()),
            ));
        }
        let value = t.select_cols(idx);
        self.push(value, Op::SelectCols(x, idx.into()), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.select_cols(x, &idx)
    }

    /// Gather entries of `x` at flat row-major positions into a `[m, 1]` column.
    pub fn pick(&mut self, x: Var, flat: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if flat.is_empty() || flat.iter().any(|&i| i >= t.numel()) {
            return Err(Error::shape("pick", format!("bad indices for {:?}", t.shape())));
        }
        let data: Vec<f64> = flat.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::matrix(flat.len(), 1, data)?;
        self.push(value, Op::Pick(x, flat.into()), &[x])
    }

    /// Squared Euclidean distances between the rows of `x`: `[n, d] -> [n, n]`.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        require_matrix("pairwise_sq_dist", t)?;
        let n = t.rows();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            let ri = t.row_slice(i);
            for j in (i + 1)..n {
                let d: f64 = ri
                    .iter()
                    .zip(t.row_slice(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        let value = Tensor::matrix(n, n, data)?;
        self.push(value, Op::PairwiseSqDist(x), &[x])
    }

    /// Elementwise product with the lower-triangular ones mask.
    pub fn tril_mask(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        require_matrix("tril_mask", t)?;
        if t.rows() != t.cols() {
            return Err(Error::shape("tril_mask", format!("{:?} is not square", t.shape())));
        }
        let mask = self.constant(Tensor::tril_ones(t.rows()));
        self.mul(x, mask)
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.nodes[loss.0];
        if lt.value.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.value.shape().to_vec()));
        }
        if !lt.requires_grad {
            return Err(Error::NotOnGraph);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                let slot = &mut self.nodes[i].grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let map1 = |x: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<f64> {
            val(x)
                .iter()
                .zip(out)
                .zip(g)
                .map(|((&xv, &yv), &gv)| f(xv, yv, gv))
                .collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[a.0].requires_grad {
                    let ga = kernels::matmul_nt(self.exec, g, tb.data(), m, n, k);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = kernels::matmul_tn(self.exec, ta.data(), g, m, k, n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                let gb = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(x, row) => {
                let c = self.nodes[row.0].value.numel();
                let mut gr = vec![0.0; c];
                for (idx, &gv) in g.iter().enumerate() {
                    gr[idx % c] += gv;
                }
                self.accumulate(grads, *x, g.to_vec());
                self.accumulate(grads, *row, gr);
            }
            Op::MulRow(x, row) => {
                let r = val(*row);
                let c = r.len();
                let xv = val(*x);
                let gx = g.iter().enumerate().map(|(idx, &gv)| gv * r[idx % c]).collect();
                let mut gr = vec![0.0; c];
                for (idx, &gv) in g.iter().enumerate() {
                    gr[idx % c] += gv * xv[idx];
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *row, gr);
            }
            Op::MulScalar(x, s) => {
                let sv = val(*s)[0];
                let gx = g.iter().map(|v| v * sv).collect();
                let gs: f64 = g.iter().zip(val(*x)).map(|(a, b)| a * b).sum();
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *s, vec![gs]);
            }
            Op::AddConst(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Scale(x, c) => self.accumulate(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::Tanh(x) => {
                let gx = map1(*x, &|_, y, gv| gv * (1.0 - y * y));
                self.accumulate(grads, *x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let gx = map1(*x, &|xv, _, gv| if xv > 0.0 { gv } else { gv * s });
                self.accumulate(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let gx = map1(*x, &|xv, _, gv| gv * sigmoid(xv));
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = map1(*x, &|_, y, gv| gv * y);
                self.accumulate(grads, *x, gx);
            }
            Op::Log(x) => {
                let gx = map1(*x, &|xv, _, gv| gv / xv);
                self.accumulate(grads, *x, gx);
            }
            Op::Sqrt(x) => {
                let gx = map1(*x, &|_, y, gv| gv * 0.5 / y);
                self.accumulate(grads, *x, gx);
            }
            Op::Square(x) => {
                let gx = map1(*x, &|xv, _, gv| gv * 2.0 * xv);
                self.accumulate(grads, *x, gx);
            }
            Op::Recip(x) => {
                let gx = map1(*x, &|_, y, gv| -gv * y * y);
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::SumCols(x) => {
                let t = &self.nodes[x.0].value;
                let c = t.cols();
                let gx = (0..t.numel()).map(|idx| g[idx / c]).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.cols();
                    if self.nodes[p.0].requires_grad {
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        self.accumulate(grads, *p, gp);
                    }
                    offset += c;
                }
            }
            Op::SelectCols(x, idx) => {
                let t = &self.nodes[x.0].value;
                let (rows, c) = (t.rows(), t.cols());
                let k = idx.len();
                let mut gx = vec![0.0; rows * c];
                for r in 0..rows {
                    for (j, &col) in idx.iter().enumerate() {
                        gx[r * c + col] += g[r * k + j];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Pick(x, flat) => {
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                for (j, &pos) in flat.iter().enumerate() {
                    gx[pos] += g[j];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::PairwiseSqDist(x) => {
                let t = &self.nodes[x.0].value;
                let (n, d) = (t.rows(), t.cols());
                let xv = t.data();
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let w = 2.0 * (g[i * n + j] + g[j * n + i]);
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            gx[i * d + c] += w * (xv[i * d + c] - xv[j * d + c]);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}
