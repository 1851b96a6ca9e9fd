//! Latent structural causal model over concept blocks: graph handling,
//! additive-noise structural functions, residual extraction and
//! noise-to-latent propagation.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, Mlp, ParamStore, Tape, Tensor, Var};

/// Graph description as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub names: Vec<String>,
    pub dims: Vec<usize>,
    pub edges: Vec<(String, String)>,
}

/// DAG over `K` concept blocks; `adj[j][k]` means `z_j -> z_k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalGraph {
    names: Vec<String>,
    dims: Vec<usize>,
    offsets: Vec<usize>,
    adj: Vec<Vec<bool>>,
    order: Vec<usize>,
}

/// Kahn's algorithm with ascending-index tie-break.
///
/// On a cycle, the error names one edge lying on it.
pub fn topological_order(names: &[String], adj: &[Vec<bool>]) -> Result<Vec<usize>> {
    let k = adj.len();
    let mut indeg: Vec<usize> = (0..k).map(|c| (0..k).filter(|&p| adj[p][c]).count()).collect();
    let mut ready: BTreeSet<usize> = (0..k).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(k);
    while let Some(&i) = ready.iter().next() {
        ready.remove(&i);
        order.push(i);
        for c in 0..k {
            if adj[i][c] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
    }
    if order.len() == k {
        return Ok(order);
    }
    // Walk parents among the unplaced nodes until one repeats.
    let placed: BTreeSet<usize> = order.iter().copied().collect();
    let mut node = (0..k).find(|i| !placed.contains(i)).expect("unplaced node");
    let mut seen = vec![false; k];
    loop {
        seen[node] = true;
        let parent = (0..k)
            .find(|&p| adj[p][node] && !placed.contains(&p))
            .expect("unplaced node keeps an unplaced parent");
        if seen[parent] {
            return Err(Error::Cycle {
                from: names[parent].clone(),
                to: names[node].clone(),
            });
        }
        node = parent;
    }
}

impl CausalGraph {
    pub fn new(names: Vec<String>, dims: Vec<usize>, edges: &[(usize, usize)]) -> Result<Self> {
        let k = names.len();
        if k == 0 {
            return Err(Error::Config("graph needs at least one concept".into()));
        }
        if dims.len() != k {
            return Err(Error::Config(format!(
                "{} concept names but {} block dimensions",
                k,
                dims.len()
            )));
        }
        if let Some(i) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Config(format!("block '{}' has dimension 0", names[i])));
        }
        let mut uniq = BTreeSet::new();
        for n in &names {
            if !uniq.insert(n) {
                return Err(Error::Config(format!("duplicate concept name '{n}'")));
            }
        }
        let mut adj = vec![vec![false; k]; k];
        for &(j, c) in edges {
            if j >= k || c >= k {
                return Err(Error::ConceptIndex {
                    index: j.max(c),
                    count: k,
                });
            }
            if j == c {
                return Err(Error::Cycle {
                    from: names[j].clone(),
                    to: names[c].clone(),
                });
            }
            adj[j][c] = true;
        }
        let order = topological_order(&names, &adj)?;
        let mut offsets = Vec::with_capacity(k);
        let mut acc = 0;
        for &d in &dims {
            offsets.push(acc);
            acc += d;
        }
        Ok(CausalGraph {
            names,
            dims,
            offsets,
            adj,
            order,
        })
    }

    pub fn from_spec(spec: &GraphSpec) -> Result<Self> {
        let index = |n: &str| {
            spec.names
                .iter()
                .position(|m| m == n)
                .ok_or_else(|| Error::UnknownConcept(n.to_string()))
        };
        let edges = spec
            .edges
            .iter()
            .map(|(a, b)| Ok((index(a)?, index(b)?)))
            .collect::<Result<Vec<_>>>()?;
        CausalGraph::new(spec.names.clone(), spec.dims.clone(), &edges)
    }

    pub fn to_spec(&self) -> GraphSpec {
        let mut edges = Vec::new();
        for j in 0..self.len() {
            for c in 0..self.len() {
                if self.adj[j][c] {
                    edges.push((self.names[j].clone(), self.names[c].clone()));
                }
            }
        }
        GraphSpec {
            names: self.names.clone(),
            dims: self.dims.clone(),
            edges,
        }
    }

    /// (size, position) -> shadow_size; (filter_color, background_color) -> shadow_color.
    pub fn filter(block_dim: usize) -> Self {
        let names = crate::synthdata::FILTER_FACTORS.iter().map(|s| s.to_string()).collect();
        CausalGraph::new(names, vec![block_dim; 6], &[(0, 4), (1, 4), (2, 5), (3, 5)])
            .expect("filter graph is a DAG")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, k: usize) -> &str {
        &self.names[k]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownConcept(name.to_string()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self, k: usize) -> usize {
        self.dims[k]
    }

    pub fn offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn block_cols(&self, k: usize) -> Vec<usize> {
        (self.offsets[k]..self.offsets[k] + self.dims[k]).collect()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.adj[from][to]
    }

    pub fn parents(&self, k: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.adj[j][k]).collect()
    }

    pub fn children(&self, k: usize) -> Vec<usize> {
        (0..self.len()).filter(|&c| self.adj[k][c]).collect()
    }

    pub fn is_root(&self, k: usize) -> bool {
        (0..self.len()).all(|j| !self.adj[j][k])
    }

    /// Columns of the concatenated parent blocks of `k`, in ascending parent order.
    pub fn parent_cols(&self, k: usize) -> Vec<usize> {
        self.parents(k).into_iter().flat_map(|j| self.block_cols(j)).collect()
    }

    pub fn parent_dim(&self, k: usize) -> usize {
        self.parents(k).iter().map(|&j| self.dims[j]).sum()
    }

    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    /// Every concept reachable from `k`, excluding `k`, ascending.
    pub fn descendants(&self, k: usize) -> Vec<usize> {
        let mut seen = vec![false; self.len()];
        let mut stack = self.children(k);
        while let Some(c) = stack.pop() {
            if !seen[c] {
                seen[c] = true;
                stack.extend(self.children(c));
            }
        }
        (0..self.len()).filter(|&i| seen[i]).collect()
    }

    pub fn partition(&self, k: usize) -> Result<CausalPartition> {
        if k >= self.len() {
            return Err(Error::ConceptIndex {
                index: k,
                count: self.len(),
            });
        }
        let descendant_set = self.descendants(k);
        let invariant_set = (0..self.len())
            .filter(|&j| j != k && !descendant_set.contains(&j))
            .collect();
        Ok(CausalPartition {
            target: k,
            descendant_set,
            invariant_set,
        })
    }
}

/// Intervention, descendant and invariant sets for a target concept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalPartition {
    pub target: usize,
    pub descendant_set: Vec<usize>,
    pub invariant_set: Vec<usize>,
}

impl CausalPartition {
    pub fn intervention_set(&self) -> [usize; 1] {
        [self.target]
    }

    /// Checks disjointness and coverage of `0..k`.
    pub fn validate(&self, k: usize) -> Result<()> {
        let mut seen = vec![0u8; k];
        for &i in self
            .intervention_set()
            .iter()
            .chain(&self.descendant_set)
            .chain(&self.invariant_set)
        {
            if i >= k {
                return Err(Error::ConceptIndex { index: i, count: k });
            }
            seen[i] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::Invalid(format!(
                "partition for target {} does not cover {k} blocks exactly once",
                self.target
            )));
        }
        Ok(())
    }
}

/// A batch of latent vectors partitioned into concept blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlocks {
    data: Tensor,
    dims: Vec<usize>,
}

impl LatentBlocks {
    pub fn new(data: Tensor, dims: &[usize]) -> Result<Self> {
        let d: usize = dims.iter().sum();
        if !data.is_matrix() || data.cols() != d {
            return Err(Error::shape(
                "latent_blocks",
                format!("data {:?} does not match block dims {dims:?}", data.shape()),
            ));
        }
        Ok(LatentBlocks {
            data,
            dims: dims.to_vec(),
        })
    }

    /// One datum from per-block vectors.
    pub fn from_blocks(blocks: &[Vec<f64>]) -> Self {
        let dims: Vec<usize> = blocks.iter().map(Vec::len).collect();
        let data = Tensor::row(&blocks.concat());
        LatentBlocks { data, dims }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn batch(&self) -> usize {
        self.data.rows()
    }

    pub fn block(&self, k: usize) -> Tensor {
        let off: usize = self.dims[..k].iter().sum();
        let cols: Vec<usize> = (off..off + self.dims[k]).collect();
        self.data.select_cols(&cols)
    }

    /// Block `k` of datum `row`.
    pub fn block_row(&self, row: usize, k: usize) -> Vec<f64> {
        let off: usize = self.dims[..k].iter().sum();
        self.data.row_slice(row)[off..off + self.dims[k]].to_vec()
    }
}

/// Structural functions `f_k` applied to the concatenation of parent blocks.
///
/// Callers only ever pass parent columns, so an implementation cannot read
/// non-parent blocks.
pub trait Mechanisms {
    fn apply(&self, tape: &mut Tape, k: usize, parents: Var) -> Result<Var>;

    /// True when every `f_k` is identically zero; callers then skip evaluation.
    fn is_zero(&self) -> bool {
        false
    }
}

/// Learned 2-layer tanh networks, one per non-root concept.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralFunctions {
    nets: Vec<Option<Mlp>>,
}

pub const STRUCTURAL_HIDDEN: usize = 32;

impl StructuralFunctions {
    /// Output layers start at zero, so `f_k = 0` before training.
    pub fn new<R: Rng>(store: &mut ParamStore, graph: &CausalGraph, hidden: usize, rng: &mut R) -> Self {
        let nets = (0..graph.len())
            .map(|k| {
                if graph.is_root(k) {
                    None
                } else {
                    Some(Mlp::new(
                        store,
                        &format!("scm.f{k}"),
                        &[graph.parent_dim(k), hidden, graph.dim(k)],
                        Activation::Tanh,
                        true,
                        rng,
                    ))
                }
            })
            .collect();
        StructuralFunctions { nets }
    }

    pub fn bind<'a>(&'a self, store: &'a ParamStore) -> BoundFunctions<'a> {
        BoundFunctions { funcs: self, store }
    }
}

pub struct BoundFunctions<'a> {
    funcs: &'a StructuralFunctions,
    store: &'a ParamStore,
}

impl Mechanisms for BoundFunctions<'_> {
    fn apply(&self, tape: &mut Tape, k: usize, parents: Var) -> Result<Var> {
        match &self.funcs.nets[k] {
            Some(net) => net.forward(tape, self.store, parents),
            None => Err(Error::Invalid(format!("concept {k} is a root and has no structural function"))),
        }
    }
}

/// `f ≡ 0` for every concept.
pub struct ZeroMechanisms;

impl Mechanisms for ZeroMechanisms {
    fn apply(&self, tape: &mut Tape, _k: usize, parents: Var) -> Result<Var> {
        let rows = tape.shape(parents)[0];
        let zero = tape.constant(Tensor::zeros(rows, 1));
        Ok(zero)
    }

    fn is_zero(&self) -> bool {
        true
    }
}

/// `n_k = z_k - f_k(PA(z_k))` on a `[B, D]` latent batch; roots pass through.
pub fn residuals_on_tape(tape: &mut Tape, graph: &CausalGraph, mech: &dyn Mechanisms, z: Var) -> Result<Var> {
    let mut blocks = Vec::with_capacity(graph.len());
    for k in 0..graph.len() {
        let zk = tape.select_cols(z, &graph.block_cols(k))?;
        if graph.is_root(k) || mech.is_zero() {
            blocks.push(zk);
        } else {
            let pa = tape.select_cols(z, &graph.parent_cols(k))?;
            let fk = mech.apply(tape, k, pa)?;
            blocks.push(tape.sub(zk, fk)?);
        }
    }
    tape.concat_cols(&blocks)
}

/// Recompute blocks in topological order as `z_k = f_k(PA) + n_k`, except where
/// `fixed[k]` supplies the block directly. Returns per-block vars in index order.
pub fn propagate_blocks(
    tape: &mut Tape,
    graph: &CausalGraph,
    mech: &dyn Mechanisms,
    n: Var,
    fixed: &[Option<Var>],
) -> Result<Vec<Var>> {
    let mut out: Vec<Option<Var>> = vec![None; graph.len()];
    for &k in graph.topological_order() {
        let zk = if let Some(v) = fixed.get(k).copied().flatten() {
            v
        } else {
            let nk = tape.select_cols(n, &graph.block_cols(k))?;
            if graph.is_root(k) || mech.is_zero() {
                nk
            } else {
                let parents: Vec<Var> = graph
                    .parents(k)
                    .into_iter()
                    .map(|j| out[j].expect("parents precede children in topological order"))
                    .collect();
                let pa = tape.concat_cols(&parents)?;
                let fk = mech.apply(tape, k, pa)?;
                tape.add(fk, nk)?
            }
        };
        out[k] = Some(zk);
    }
    Ok(out.into_iter().map(|v| v.expect("every block computed")).collect())
}

pub fn propagate_on_tape(tape: &mut Tape, graph: &CausalGraph, mech: &dyn Mechanisms, n: Var) -> Result<Var> {
    let blocks = propagate_blocks(tape, graph, mech, n, &[])?;
    tape.concat_cols(&blocks)
}

fn check_blocks(graph: &CausalGraph, z: &LatentBlocks) -> Result<()> {
    if z.dims() != graph.dims() {
        return Err(Error::shape(
            "latent_blocks",
            format!("block dims {:?} vs graph dims {:?}", z.dims(), graph.dims()),
        ));
    }
    Ok(())
}

pub fn residuals(z: &LatentBlocks, mech: &dyn Mechanisms, graph: &CausalGraph) -> Result<LatentBlocks> {
    check_blocks(graph, z)?;
    let mut tape = Tape::new();
    let zv = tape.constant(z.tensor().clone());
    let n = residuals_on_tape(&mut tape, graph, mech, zv)?;
    LatentBlocks::new(tape.value(n).clone(), graph.dims())
}

pub fn propagate(n: &LatentBlocks, mech: &dyn Mechanisms, graph: &CausalGraph) -> Result<LatentBlocks> {
    check_blocks(graph, n)?;
    let mut tape = Tape::new();
    let nv = tape.constant(n.tensor().clone());
    let z = propagate_on_tape(&mut tape, graph, mech, nv)?;
    LatentBlocks::new(tape.value(z).clone(), graph.dims())
}

/// Central-difference Jacobian of `map` at `x`, row `i` = d out_i / d x.
pub fn numerical_jacobian(map: impl Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], h: f64) -> Result<Vec<Vec<f64>>> {
    let n_out = map(x)?.len();
    let mut jac = vec![vec![0.0; x.len()]; n_out];
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let up = map(&probe)?;
        probe[j] = x[j] - h;
        let down = map(&probe)?;
        probe[j] = x[j];
        for i in 0..n_out {
            jac[i][j] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(mut m: Vec<Vec<f64>>) -> f64 {
    let n = m.len();
    let mut det = 1.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .expect("non-empty");
        if m[piv][col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            m.swap(piv, col);
            det = -det;
        }
        det *= m[col][col];
        for r in (col + 1)..n {
            let factor = m[r][col] / m[col][col];
            if factor != 0.0 {
                for c in col..n {
                    m[r][c] -= factor * m[col][c];
                }
            }
        }
    }
    det
}

/// `|det ∂n/∂z|` of the residual map at a single latent vector, by finite differences.
pub fn jacobian_logdet_check(mech: &dyn Mechanisms, graph: &CausalGraph, z: &[f64]) -> Result<f64> {
    if z.len() != graph.total_dim() {
        return Err(Error::shape(
            "jacobian_logdet_check",
            format!("latent of length {} for total dim {}", z.len(), graph.total_dim()),
        ));
    }
    let map = |v: &[f64]| -> Result<Vec<f64>> {
        let blocks = LatentBlocks::new(Tensor::row(v), graph.dims())?;
        Ok(residuals(&blocks, mech, graph)?.into_tensor().into_data())
    };
    let jac = numerical_jacobian(map, z, 1e-5)?;
    Ok(determinant(jac).abs())
}
