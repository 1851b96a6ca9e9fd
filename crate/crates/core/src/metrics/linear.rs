use crate::error::{Error, Result};

const RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct R2 {
    pub value: f64,
    /// The design matrix was rank deficient and the ridge fallback was used.
    pub ridge: bool,
}

/// Solve the symmetric system `a x = b` by Cholesky; `None` if not positive definite.
fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut l = vec![vec![0.0; n]; n];
    let scale = (0..n).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(1.0);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i][j] - (0..j).map(|t| l[i][t] * l[j][t]).sum::<f64>();
            if i == j {
                if s <= 1e-12 * scale {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|t| l[i][t] * y[t]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|t| l[t][i] * x[t]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

/// Coefficient of determination of OLS with intercept from rows `z` to `u`,
/// clamped at 0.
pub fn r2_linear(z: &[Vec<f64>], u: &[f64]) -> Result<R2> {
    let n = u.len();
    if z.len() != n || n == 0 {
        return Err(Error::shape("r2_linear", format!("{} rows for {} labels", z.len(), n)));
    }
    let d = z[0].len();
    if z.iter().any(|r| r.len() != d) {
        return Err(Error::shape("r2_linear", "ragged design rows"));
    }
    if n <= d + 1 {
        return Err(Error::Invalid(format!("r2_linear needs more than {} samples, got {n}", d + 1)));
    }
    let p = d + 1;
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for (row, &y) in z.iter().zip(u) {
        let x: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
        for i in 0..p {
            xty[i] += x[i] * y;
            for j in 0..p {
                xtx[i][j] += x[i] * x[j];
            }
        }
    }
    let (beta, ridge) = match cholesky_solve(&xtx, &xty) {
        Some(b) => (b, false),
        None => {
            let mut reg = xtx.clone();
            for (i, r) in reg.iter_mut().enumerate().skip(1) {
                r[i] += RIDGE * n as f64;
            }
            reg[0][0] += RIDGE;
            let b = cholesky_solve(&reg, &xty)
                .ok_or_else(|| Error::Invalid("ridge system is still singular".into()))?;
            (b, true)
        }
    };
    let mean = u.iter().sum::<f64>() / n as f64;
    let tss: f64 = u.iter().map(|y| (y - mean).powi(2)).sum();
    if tss == 0.0 {
        return Ok(R2 { value: 0.0, ridge });
    }
    let rss: f64 = z
        .iter()
        .zip(u)
        .map(|(row, y)| {
            let pred = beta[0] + row.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
            (y - pred).powi(2)
        })
        .sum();
    Ok(R2 {
        value: (1.0 - rss / tss).clamp(0.0, 1.0),
        ridge,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoMeans {
    pub centers: [f64; 2],
    pub stds: [f64; 2],
    pub counts: [usize; 2],
}

impl TwoMeans {
    /// Center gap in units of the larger within-cluster standard deviation.
    pub fn separation(&self) -> f64 {
        let s = self.stds[0].max(self.stds[1]);
        if s == 0.0 {
            f64::INFINITY
        } else {
            (self.centers[1] - self.centers[0]).abs() / s
        }
    }
}

/// Exact 1-D 2-means: the optimal split of sorted values is contiguous.
pub fn kmeans2_1d(v: &[f64]) -> Result<TwoMeans> {
    if v.len() < 2 {
        return Err(Error::Invalid("2-means needs at least two values".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let mut pre = vec![0.0; n + 1];
    let mut pre2 = vec![0.0; n + 1];
    for i in 0..n {
        pre[i + 1] = pre[i] + s[i];
        pre2[i + 1] = pre2[i] + s[i] * s[i];
    }
    let sse = |a: usize, b: usize| {
        let m = (b - a) as f64;
        let sum = pre[b] - pre[a];
        (pre2[b] - pre2[a]) - sum * sum / m
    };
    let best = (1..n)
        .min_by(|&i, &j| (sse(0, i) + sse(i, n)).total_cmp(&(sse(0, j) + sse(j, n))))
        .expect("n >= 2");
    let stats = |a: usize, b: usize| {
        let m = (b - a) as f64;
        let mean = (pre[b] - pre[a]) / m;
        (mean, (sse(a, b).max(0.0) / m).sqrt())
    };
    let (c0, s0) = stats(0, best);
    let (c1, s1) = stats(best, n);
    Ok(TwoMeans {
        centers: [c0, c1],
        stds: [s0, s1],
        counts: [best, n - best],
    })
}
