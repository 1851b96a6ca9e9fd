//! Maximal and total information coefficients.
//!
//! For each grid with `a, b >= 2` and `a b <= n^alpha`, one axis is
//! equipartitioned by rank into `b` rows and the other axis is partitioned
//! optimally into at most `a` columns by dynamic programming over clumps of
//! consecutive points. Both orientations are tried and the better one kept.
//! Every mutual information is normalized by `ln min(a, b)`.

use crate::error::{Error, Result};

pub const MIN_SAMPLES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicOptions {
    /// Grid budget exponent: `a b <= n^alpha`.
    pub alpha: f64,
    /// Clump limit factor: at most `clumps * a` clumps enter the DP.
    pub clumps: f64,
}

impl Default for MicOptions {
    fn default() -> Self {
        MicOptions {
            alpha: 0.6,
            clumps: 15.0,
        }
    }
}

/// Normalized mutual information per admissible grid `(columns, rows)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacteristicMatrix {
    pub entries: Vec<((usize, usize), f64)>,
}

impl CharacteristicMatrix {
    pub fn mic(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn tic(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.1).sum::<f64>() / self.entries.len() as f64
    }
}

/// Rank equipartition into at most `bins` groups; equal values share a group.
/// `order` sorts the values ascending.
fn equipartition(values: &[f64], order: &[usize], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut out = vec![0; n];
    let mut row = 0;
    let mut row_size = 0usize;
    let mut desired = n as f64 / bins as f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let s = j - i;
        if row_size != 0
            && row + 1 < bins
            && ((row_size + s) as f64 - desired).abs() >= (row_size as f64 - desired).abs()
        {
            row += 1;
            row_size = 0;
            desired = (n - i) as f64 / (bins - row) as f64;
        }
        for &p in &order[i..j] {
            out[p] = row;
        }
        row_size += s;
        i = j;
    }
    out
}

/// Clump boundaries (prefix counts in `order`) for rows `q`.
fn clumps(values: &[f64], order: &[usize], q: &[usize]) -> Vec<usize> {
    let n = order.len();
    // label each tie group by its row, or as mixed
    let mut groups: Vec<(usize, Option<usize>)> = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        let r = q[order[i]];
        let mut same = true;
        while j < n && values[order[j]] == values[order[i]] {
            same &= q[order[j]] == r;
            j += 1;
        }
        groups.push((j, same.then_some(r)));
        i = j;
    }
    let mut bounds = Vec::new();
    for (g, &(end, label)) in groups.iter().enumerate() {
        let next = groups.get(g + 1).map(|x| x.1);
        let merge = matches!((label, next), (Some(a), Some(Some(b))) if a == b);
        if !merge {
            bounds.push(end);
        }
    }
    bounds
}

/// Merge clumps into at most `limit` superclumps of roughly equal mass.
fn superclumps(bounds: &[usize], limit: usize) -> Vec<usize> {
    if bounds.len() <= limit {
        return bounds.to_vec();
    }
    let n = *bounds.last().expect("nonempty");
    let mut out = Vec::with_capacity(limit);
    let mut start = 0;
    let mut k = 0;
    let mut groups = 0;
    let mut desired = n as f64 / limit as f64;
    while k < bounds.len() {
        let size_now = bounds[k] - start;
        let next_end = if k + 1 < bounds.len() { bounds[k + 1] } else { n };
        let with_next = next_end - start;
        let is_last = k + 1 == bounds.len();
        let close = !is_last
            && groups + 1 < limit
            && ((with_next as f64 - desired).abs() >= (size_now as f64 - desired).abs());
        if close || is_last {
            out.push(bounds[k]);
            groups += 1;
            start = bounds[k];
            if groups < limit {
                desired = (n - start) as f64 / (limit - groups) as f64;
            }
        }
        k += 1;
    }
    out
}

fn xlogx_ratio(c: f64, total: f64) -> f64 {
    if c > 0.0 {
        c * (c / total).ln()
    } else {
        0.0
    }
}

/// Best `H(Q) - H(Q|P)` over column partitions with at most `l` columns, for
/// `l = 2..=max_cols`. Columns split only at `bounds`.
fn optimize_axis(order: &[usize], q: &[usize], rows: usize, bounds: &[usize], max_cols: usize) -> Vec<f64> {
    let n = order.len();
    let k = bounds.len();
    let mut prefix = vec![vec![0u32; rows]; k + 1];
    let mut p = 0;
    for (t, &end) in bounds.iter().enumerate() {
        prefix[t + 1] = prefix[t].clone();
        while p < end {
            prefix[t + 1][q[order[p]]] += 1;
            p += 1;
        }
    }
    let totals: Vec<f64> = prefix[k].iter().map(|&c| c as f64).collect();
    let hq: f64 = -totals.iter().map(|&c| xlogx_ratio(c, n as f64)).sum::<f64>() / n as f64;
    // w[s][t] = sum_r c_r ln(c_r / c) for the column of clumps s..t
    let w = |s: usize, t: usize| -> f64 {
        let mut total = 0.0;
        let mut acc = 0.0;
        for r in 0..rows {
            let c = (prefix[t][r] - prefix[s][r]) as f64;
            total += c;
            acc += if c > 0.0 { c * c.ln() } else { 0.0 };
        }
        if total > 0.0 {
            acc - total * total.ln()
        } else {
            0.0
        }
    };
    let mut wm = vec![0.0; (k + 1) * (k + 1)];
    for s in 0..k {
        for t in s + 1..=k {
            wm[s * (k + 1) + t] = w(s, t);
        }
    }
    let wat = |s: usize, t: usize| wm[s * (k + 1) + t];
    let neg = f64::NEG_INFINITY;
    let mut prev: Vec<f64> = (0..=k).map(|t| if t == 0 { neg } else { wat(0, t) }).collect();
    let mut best = prev[k];
    let mut out = Vec::with_capacity(max_cols.saturating_sub(1));
    for l in 2..=max_cols {
        let mut cur = vec![neg; k + 1];
        for t in l..=k {
            let mut m = neg;
            for s in (l - 1)..t {
                let v = prev[s] + wat(s, t);
                if v > m {
                    m = v;
                }
            }
            cur[t] = m;
        }
        if cur[k] > best {
            best = cur[k];
        }
        out.push(hq + best / n as f64);
        prev = cur;
    }
    out
}

fn sort_order(v: &[f64]) -> Vec<usize> {
    let mut o: Vec<usize> = (0..v.len()).collect();
    o.sort_by(|&i, &j| v[i].total_cmp(&v[j]).then(i.cmp(&j)));
    o
}

/// `m[a][b]` with `a` optimized columns over `x` and `b` equipartitioned rows over `y`.
fn oriented(x: &[f64], y: &[f64], budget: f64, opts: &MicOptions, into: &mut Vec<Vec<f64>>) {
    let xo = sort_order(x);
    let yo = sort_order(y);
    let max_rows = (budget / 2.0).floor() as usize;
    for b in 2..=max_rows {
        let max_cols = (budget / b as f64).floor() as usize;
        if max_cols < 2 {
            continue;
        }
        let q = equipartition(y, &yo, b);
        let rows = q.iter().max().map_or(1, |m| m + 1);
        let limit = ((opts.clumps * max_cols as f64) as usize).max(1);
        let bounds = superclumps(&clumps(x, &xo, &q), limit);
        let mi = optimize_axis(&xo, &q, rows, &bounds, max_cols);
        for (i, &v) in mi.iter().enumerate() {
            let a = i + 2;
            let norm = (a.min(b) as f64).ln();
            let val = (v / norm).clamp(0.0, 1.0);
            if val > into[a][b] {
                into[a][b] = val;
            }
        }
    }
}

fn validate(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape("mic", format!("{} vs {} samples", x.len(), y.len())));
    }
    if x.len() < MIN_SAMPLES {
        return Err(Error::Invalid(format!("mic needs at least {MIN_SAMPLES} samples, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mic input".into()));
    }
    Ok(())
}

pub fn characteristic_matrix(x: &[f64], y: &[f64], opts: &MicOptions) -> Result<CharacteristicMatrix> {
    validate(x, y)?;
    let n = x.len();
    let budget = (n as f64).powf(opts.alpha).max(4.0);
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    let side = (budget / 2.0).floor() as usize + 1;
    let mut m = vec![vec![0.0; side.max(3)]; side.max(3)];
    if !(constant(x) || constant(y)) {
        let mut swapped = vec![vec![0.0; side.max(3)]; side.max(3)];
        oriented(x, y, budget, opts, &mut m);
        oriented(y, x, budget, opts, &mut swapped);
        for a in 0..m.len() {
            for b in 0..m.len() {
                m[a][b] = m[a][b].max(swapped[b][a]);
            }
        }
    }
    let mut entries = Vec::new();
    for a in 2..m.len() {
        for b in 2..m.len() {
            if (a * b) as f64 <= budget {
                entries.push(((a, b), m[a][b]));
            }
        }
    }
    Ok(CharacteristicMatrix { entries })
}

pub fn mic_tic(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let m = characteristic_matrix(x, y, &MicOptions::default())?;
    Ok((m.mic(), m.tic()))
}

pub fn mic(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(mic_tic(x, y)?.0)
}

pub fn tic(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(mic_tic(x, y)?.1)
}
