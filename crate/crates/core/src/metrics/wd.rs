use crate::error::{Error, Result};

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("wd1 input".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Linear-interpolated quantile at plotting position `p` in `[0, n-1]`.
fn quantile(s: &[f64], p: f64) -> f64 {
    let p = p.clamp(0.0, (s.len() - 1) as f64);
    let lo = p.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    let w = p - lo as f64;
    s[lo] + w * (s[hi] - s[lo])
}

/// Empirical 1-Wasserstein distance between two scalar samples.
///
/// Equal sizes match order statistics directly. Otherwise both quantile
/// functions are evaluated at the `max(n, m)` midpoint levels `(i + 0.5)/N`.
pub fn wd1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("wd1 needs non-empty samples".into()));
    }
    let (sa, sb) = (sorted(a)?, sorted(b)?);
    if sa.len() == sb.len() {
        let s: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum();
        return Ok(s / sa.len() as f64);
    }
    let n = sa.len().max(sb.len());
    let s: f64 = (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            let qa = quantile(&sa, t * sa.len() as f64 - 0.5);
            let qb = quantile(&sb, t * sb.len() as f64 - 0.5);
            (qa - qb).abs()
        })
        .sum();
    Ok(s / n as f64)
}
