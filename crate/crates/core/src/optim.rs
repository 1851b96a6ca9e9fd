//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters without a gradient still receive weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Mismatch(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut by_id: Vec<Option<&Tensor>> = vec![None; store.len()];
        for (id, g) in grads {
            if g.shape() != store.get(*id).shape() {
                return Err(Error::shape(
                    "AdamW::step",
                    format!("gradient {:?} for parameter {:?}", g.shape(), store.get(*id).shape()),
                ));
            }
            by_id[id.0] = Some(g);
        }
        for (i, g) in by_id.into_iter().enumerate() {
            let p = store.get_mut(ParamId(i)).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then half-cosine down to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    0.5 * base_lr * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(value));
        s
    }

    #[test]
    fn zero_grads_no_decay_leave_params() {
        let mut s = single(0.7);
        let mut opt = AdamW::new(&s, 0.0);
        opt.step(&mut s, &[(ParamId(0), Tensor::scalar(0.0))], 0.1).unwrap();
        assert_eq!(s.get(ParamId(0)).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = single(1.0);
        let mut opt = AdamW::new(&s, 0.0);
        opt.step(&mut s, &[(ParamId(0), Tensor::scalar(1.0))], 0.1).unwrap();
        let p = s.get(ParamId(0)).item();
        assert!((p - 0.9).abs() < 1e-7, "{p}");
        let mut s = single(1.0);
        let mut opt = AdamW::new(&s, 0.0);
        opt.step(&mut s, &[(ParamId(0), Tensor::scalar(-250.0))], 0.1).unwrap();
        assert!((s.get(ParamId(0)).item() - 1.1).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let mut s = single(1.0);
        let mut opt = AdamW::new(&s, 0.1);
        opt.step(&mut s, &[], 0.1).unwrap();
        assert!((s.get(ParamId(0)).item() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = single(1.0);
        let mut opt = AdamW::new(&s, 0.0);
        assert!(opt.step(&mut s, &[(ParamId(0), Tensor::zeros(1, 2))], 0.1).is_err());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = single(3.0);
        let mut opt = AdamW::new(&s, 0.0);
        for _ in 0..2000 {
            let p = s.get(ParamId(0)).item();
            opt.step(&mut s, &[(ParamId(0), Tensor::scalar(2.0 * (p - 1.0)))], 0.01).unwrap();
        }
        assert!((s.get(ParamId(0)).item() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn schedule_landmarks() {
        assert_eq!(lr_schedule(10, 100, 10, 1e-3), 1e-3);
        assert!(lr_schedule(100, 100, 10, 1e-3).abs() < 1e-18);
        assert!((lr_schedule(55, 100, 10, 1e-3) - 5e-4).abs() < 1e-15);
        assert_eq!(lr_schedule(0, 100, 10, 1e-3), 0.0);
        assert!((lr_schedule(5, 100, 10, 1e-3) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn schedule_continuous_at_boundary() {
        let below = lr_schedule(999, 10_000, 1000, 1.0);
        let at = lr_schedule(1000, 10_000, 1000, 1.0);
        let above = lr_schedule(1001, 10_000, 1000, 1.0);
        assert!((at - below).abs() < 2e-3 && (above - at).abs() < 2e-3);
        for s in 0..10_000 {
            let d = (lr_schedule(s + 1, 10_000, 1000, 1.0) - lr_schedule(s, 10_000, 1000, 1.0)).abs();
            assert!(d <= 1e-3 + 1e-12);
        }
    }
}
