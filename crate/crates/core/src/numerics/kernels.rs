//! Dense matrix kernels shared by the forward and backward passes.
//!
//! Parallel variants split the output by rows; each output row is computed
//! by exactly one task with a fixed summation order.

use crate::parallel::Exec;

/// Below this many multiply-adds the sequential kernel is always used.
const PAR_THRESHOLD: usize = 1 << 16;

fn pick(exec: Exec, work: usize) -> Exec {
    if work < PAR_THRESHOLD {
        Exec::Sequential
    } else {
        exec
    }
}

fn row_chunk(rows: usize) -> usize {
    rows.div_ceil(crate::parallel::available_threads().max(1) * 4).max(1)
}

/// `out[m,n] = a[m,k] * b[k,n]`
pub fn matmul(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return out;
    }
    let rows = row_chunk(m);
    pick(exec, m * k * n).for_chunks_mut(&mut out, rows * n, |chunk, ci| {
        let r0 = ci * rows;
        for (ri, orow) in chunk.chunks_mut(n).enumerate() {
            let arow = &a[(r0 + ri) * k..(r0 + ri + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    });
    out
}

/// `out[m,n] = a[m,k] * b[n,k]^T`
pub fn matmul_nt(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return out;
    }
    let rows = row_chunk(m);
    pick(exec, m * k * n).for_chunks_mut(&mut out, rows * n, |chunk, ci| {
        let r0 = ci * rows;
        for (ri, orow) in chunk.chunks_mut(n).enumerate() {
            let arow = &a[(r0 + ri) * k..(r0 + ri + 1) * k];
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
    });
    out
}

/// `out[k,n] = a[m,k]^T * b[m,n]`
pub fn matmul_tn(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    if k == 0 || n == 0 {
        return out;
    }
    let rows = row_chunk(k);
    pick(exec, m * k * n).for_chunks_mut(&mut out, rows * n, |chunk, ci| {
        let r0 = ci * rows;
        for (ri, orow) in chunk.chunks_mut(n).enumerate() {
            let col = r0 + ri;
            for i in 0..m {
                let av = a[i * k + col];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    });
    out
}
