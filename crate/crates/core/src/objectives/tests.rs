use super::*;
use crate::flowprior::{FlowStack, PriorKind};
use crate::numerics::grad_check;
use crate::numerics::tape::softplus;
use crate::posterior::{build_cholesky_on_tape, log_density_on_tape, sample_on_tape, BlockLayout, PosteriorVars};
use crate::scm::{determinant, numerical_jacobian, residuals, LatentBlocks, StructuralFunctions, ZeroMechanisms};
use std::f64::consts::PI;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn chain(dims: Vec<usize>) -> CausalGraph {
    let k = dims.len();
    let names = (0..k).map(|i| format!("c{i}")).collect();
    let edges: Vec<(usize, usize)> = (1..k).map(|i| (i - 1, i)).collect();
    CausalGraph::new(names, dims, &edges).unwrap()
}

fn randomize(store: &mut ParamStore, r: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += scale * r.random_range(-1.0..1.0);
        }
    }
}

#[test]
fn recon_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::row(&[0.0, 0.0]));
    let b = tape.constant(Tensor::row(&[1.0, 1.0]));
    let l = recon_loss(&mut tape, a, b).unwrap();
    assert_eq!(tape.value(l).item(), 1.0);
    let l = recon_loss(&mut tape, a, a).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    let target = Tensor::randn(&mut rng(1), 4, 3);
    let x = Tensor::randn(&mut rng(2), 4, 3);
    let err = grad_check(
        |t, v| {
            let c = t.constant(target.clone());
            recon_loss(t, v, c)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn prior_logprob_standard_normal_at_zero() {
    let g = chain(vec![1, 1]);
    let mut store = ParamStore::new();
    let prior = ExogenousPrior::new(PriorKind::Flow, &mut store, g.dims(), 4, &mut rng(3));
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(1, 2));
    let (lp, _) = scm_prior_logprob(&mut tape, &store, &g, &ZeroMechanisms, &prior, z).unwrap();
    assert!((tape.value(lp).item() + 1.837877).abs() < 1e-6);
    let sn = ExogenousPrior::new(PriorKind::StandardNormal, &mut store, g.dims(), 4, &mut rng(3));
    let (lp2, _) = scm_prior_logprob(&mut tape, &store, &g, &ZeroMechanisms, &sn, z).unwrap();
    assert_eq!(tape.value(lp2).item(), tape.value(lp).item());
}

fn trained_like(seed: u64) -> (CausalGraph, ParamStore, StructuralFunctions, FlowStack) {
    let mut r = rng(seed);
    let g = CausalGraph::filter(2);
    let mut store = ParamStore::new();
    let f = StructuralFunctions::new(&mut store, &g, 8, &mut r);
    let flows = FlowStack::new(&mut store, g.dims(), 2, &mut r);
    randomize(&mut store, &mut r, 0.4);
    (g, store, f, flows)
}

#[test]
fn prior_logprob_composes_residuals_and_flows() {
    let (g, store, f, flows) = trained_like(4);
    let z = Tensor::randn(&mut rng(5), 6, g.total_dim());
    let mech = f.bind(&store);
    let prior = ExogenousPrior::Flow(flows.clone());
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let (lp, _) = scm_prior_logprob(&mut tape, &store, &g, &mech, &prior, zv).unwrap();
    let n = residuals(&LatentBlocks::new(z, g.dims()).unwrap(), &mech, &g).unwrap();
    let mut expect = vec![0.0; 6];
    for k in 0..g.len() {
        for (e, v) in expect.iter_mut().zip(flows.log_prob_values(&store, k, &n.block(k)).unwrap()) {
            *e += v;
        }
    }
    assert_eq!(tape.value(lp).data(), expect.as_slice());
}

#[test]
fn prior_logprob_needs_no_jacobian_correction() {
    let (g, store, f, flows) = trained_like(6);
    let mech = f.bind(&store);
    let prior = ExogenousPrior::Flow(flows);
    let mut r = rng(7);
    for _ in 0..10 {
        let z = Tensor::randn(&mut r, 1, g.total_dim());
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let (lp, _) = scm_prior_logprob(&mut tape, &store, &g, &mech, &prior, zv).unwrap();
        let jac = numerical_jacobian(
            |v| Ok(residuals(&LatentBlocks::new(Tensor::row(v), g.dims())?, &mech, &g)?.into_tensor().into_data()),
            z.data(),
            1e-5,
        )
        .unwrap();
        let corrected = tape.value(lp).item() + determinant(jac).abs().ln();
        assert!((corrected - tape.value(lp).item()).abs() < 1e-5);
    }
}

/// Monte-Carlo KL of a single-datum block posterior against `N(0, I)`,
/// returned with its standard error.
fn kl_estimate(layout: &BlockLayout, mu: &[f64], raw: &[f64], n: usize, seed: u64) -> (f64, f64) {
    let g = CausalGraph::new((0..layout.dims().len()).map(|i| format!("c{i}")).collect(), layout.dims().to_vec(), &[]).unwrap();
    let mut store = ParamStore::new();
    let prior = ExogenousPrior::new(PriorKind::Flow, &mut store, layout.dims(), 4, &mut rng(0));
    let mut tape = Tape::new();
    let rep = |v: &[f64]| Tensor::from_rows(&vec![v.to_vec(); n]).unwrap();
    let muv = tape.constant(rep(mu));
    let rawv = tape.constant(rep(raw));
    let chol = build_cholesky_on_tape(&mut tape, layout, rawv).unwrap();
    let post = PosteriorVars { mu: muv, chol };
    let eps = Tensor::randn(&mut rng(seed), n, layout.total_dim());
    let z = sample_on_tape(&mut tape, layout, post, &eps).unwrap();
    let lq = log_density_on_tape(&mut tape, layout, post, &eps).unwrap();
    let (lp, _) = scm_prior_logprob(&mut tape, &store, &g, &ZeroMechanisms, &prior, z).unwrap();
    let kl = kl_mc(&mut tape, lq, lp).unwrap();
    let est = tape.value(kl).item();
    let diffs: Vec<f64> = tape.value(lq).data().iter().zip(tape.value(lp).data()).map(|(a, b)| a - b).collect();
    let var = diffs.iter().map(|d| (d - est).powi(2)).sum::<f64>() / (n - 1) as f64;
    (est, (var / n as f64).sqrt())
}

/// `softplus^-1(s - floor)`, so the factor diagonal is exactly `s`.
fn raw_for(s: f64) -> f64 {
    let t = s - crate::posterior::DIAG_FLOOR;
    (t.exp() - 1.0).ln()
}

#[test]
fn kl_of_prior_against_itself_is_zero() {
    let layout = BlockLayout::new(&[1, 1]).unwrap();
    let (est, se) = kl_estimate(&layout, &[0.0, 0.0], &[raw_for(1.0), raw_for(1.0)], 100_000, 1);
    assert!(est.abs() <= 3.0 * se + 1e-9, "{est} ± {se}");
}

#[test]
fn kl_of_shifted_unit_gaussian() {
    let layout = BlockLayout::new(&[2]).unwrap();
    let mu = [0.7, -1.2];
    let one = raw_for(1.0);
    let (est, se) = kl_estimate(&layout, &mu, &[one, 0.0, 0.0, one], 100_000, 2);
    let exact = 0.5 * (0.49 + 1.44);
    // identity covariance: log q - log p is linear in eps, so MC is unbiased
    assert!((est - exact).abs() <= 3.0 * se, "{est} vs {exact} ± {se}");
}

#[test]
fn kl_of_diagonal_gaussian() {
    let layout = BlockLayout::new(&[1, 1, 1]).unwrap();
    let sig = [0.5, 1.3, 2.0];
    let raw: Vec<f64> = sig.iter().map(|&s| raw_for(s)).collect();
    let (est, se) = kl_estimate(&layout, &[0.0; 3], &raw, 100_000, 3);
    let exact: f64 = sig.iter().map(|s| 0.5 * (s * s - 1.0 - (s * s).ln())).sum();
    assert!((est - exact).abs() <= 3.0 * se, "{est} vs {exact} ± {se}");
}

#[test]
fn kl_against_closed_form_on_random_posteriors() {
    let mut r = rng(9);
    for trial in 0..5 {
        let dims: Vec<usize> = (0..r.random_range(1..=3)).map(|_| r.random_range(1..=2)).collect();
        let layout = BlockLayout::new(&dims).unwrap();
        let mu: Vec<f64> = (0..layout.total_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
        let raw: Vec<f64> = (0..layout.chol_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
        let (est, se) = kl_estimate(&layout, &mu, &raw, 100_000, 100 + trial);
        let post = crate::posterior::BlockGaussian::from_raw(&layout, &mu, &raw).unwrap();
        let mut exact = 0.5 * mu.iter().map(|m| m * m).sum::<f64>();
        for l in &post.chol {
            let d = l.rows();
            let tr: f64 = l.data().iter().map(|v| v * v).sum();
            let logdet: f64 = (0..d).map(|i| 2.0 * l.get(i, i).ln()).sum();
            exact += 0.5 * (tr - d as f64 - logdet);
        }
        assert!((est - exact).abs() <= 3.0 * se, "trial {trial}: {est} vs {exact} ± {se}");
    }
}

#[test]
fn sup_examples() {
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::row(&[0.0]));
    let l = sup_loss(&mut tape, r, &Tensor::row(&[2.0])).unwrap();
    assert_eq!(tape.value(l).item(), 4.0);
    let r = tape.constant(Tensor::row(&[1.5, -0.5]));
    let l = sup_loss(&mut tape, r, &Tensor::row(&[1.5, -0.5])).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    assert!(matches!(sup_loss(&mut tape, r, &Tensor::row(&[1.0])), Err(Error::Mismatch(_))));
    let u = Tensor::randn(&mut rng(10), 5, 3);
    let x = Tensor::randn(&mut rng(11), 5, 3);
    let err = grad_check(|t, v| sup_loss(t, v, &u), &x, 1e-6).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn heads_feed_supervision() {
    let g = chain(vec![2, 2]);
    let mut store = ParamStore::new();
    let heads = SupervisionHeads::new(&mut store, g.dims(), &mut rng(12));
    let z = Tensor::randn(&mut rng(13), 7, 4);
    let r = heads.readouts(&store, &g, &z).unwrap();
    assert_eq!(r.shape(), &[7, 2]);
    let w = store.get(heads.heads[1].weight).data().to_vec();
    let b = store.get(heads.heads[1].bias).item();
    let expect = z.get(3, 2) * w[0] + z.get(3, 3) * w[1] + b;
    assert!((r.get(3, 1) - expect).abs() < 1e-14);
}

fn cons_value(g: &CausalGraph, part: &CausalPartition, z: &[f64], zt: &[f64], zh: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::row(z));
    let b = tape.constant(Tensor::row(zt));
    let c = tape.constant(Tensor::row(zh));
    let w = ConsistencyWeights {
        lambda1: 1.0,
        lambda2: 10.0,
        lambda3: 1.0,
    };
    let l = consistency_loss(&mut tape, g, a, b, c, part, w)?;
    Ok(tape.value(l).item())
}

#[test]
fn consistency_examples() {
    let g = chain(vec![1, 1]);
    let part = g.partition(0).unwrap();
    assert_eq!(cons_value(&g, &part, &[0.0, 0.0], &[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert_eq!(cons_value(&g, &part, &[0.0, 0.0], &[1.0, 2.0], &[1.0, 3.0]).unwrap(), 10.0);
    assert_eq!(cons_value(&g, &part, &[0.0, 0.0], &[1.0, 2.0], &[2.0, 2.0]).unwrap(), 1.0);
    let g3 = CausalGraph::new(vec!["a".into(), "b".into(), "c".into()], vec![1, 1, 1], &[(0, 1)]).unwrap();
    let p3 = g3.partition(0).unwrap();
    assert_eq!(cons_value(&g3, &p3, &[0.0, 0.0, 5.0], &[1.0, 2.0, 5.0], &[1.0, 2.0, 3.0]).unwrap(), 4.0);
    let bad = CausalPartition {
        target: 0,
        descendant_set: vec![],
        invariant_set: vec![],
    };
    assert!(cons_value(&g3, &bad, &[0.0; 3], &[0.0; 3], &[0.0; 3]).is_err());
}

#[test]
fn consistency_zero_iff_groups_zero() {
    let g = CausalGraph::filter(1);
    let mut r = rng(14);
    for k in 0..6 {
        let part = g.partition(k).unwrap();
        let z: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let zt: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut zh = zt.clone();
        for &j in &part.invariant_set {
            zh[j] = z[j];
        }
        assert_eq!(cons_value(&g, &part, &z, &zt, &zh).unwrap(), 0.0);
        for j in 0..6 {
            let mut p = zh.clone();
            p[j] += 0.1;
            assert!(cons_value(&g, &part, &z, &zt, &p).unwrap() > 0.0);
        }
    }
}

#[test]
fn hsic_constant_is_zero() {
    let a = Tensor::randn(&mut rng(15), 50, 2);
    let b = Tensor::filled(50, 1, 3.0);
    assert!(hsic(&a, &b).unwrap().abs() < 1e-12);
}

#[test]
fn hsic_is_symmetric() {
    let a = Tensor::randn(&mut rng(16), 40, 2);
    let b = Tensor::randn(&mut rng(17), 40, 3);
    let (x, y) = (hsic(&a, &b).unwrap(), hsic(&b, &a).unwrap());
    assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0), "{x} {y}");
}

#[test]
fn hsic_matches_centered_trace() {
    let a = Tensor::randn(&mut rng(18), 12, 2);
    let b = Tensor::randn(&mut rng(19), 12, 1);
    let (k, l) = (gram_values(&a).unwrap(), gram_values(&b).unwrap());
    let kc = center(&k);
    let lc = center(&l);
    let n = 12;
    let tr: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| kc.get(i, j) * lc.get(j, i)).sum();
    assert!((hsic(&a, &b).unwrap() - tr / (n * n) as f64).abs() < 1e-14);
}

#[test]
fn hsic_detects_dependence() {
    let a = Tensor::randn(&mut rng(20), 200, 1);
    let t = hsic_permutation_test(&a, &a, 200, 1, Exec::default()).unwrap();
    assert!(t.rejects_independence(), "{} <= {}", t.statistic, t.threshold);
}

#[test]
fn hsic_null_calibration() {
    // a 5% test fails more than 5 of 50 trials with probability about 0.05
    let mut passes = 0;
    for trial in 0..50 {
        let mut r = rng(trial);
        let a = Tensor::randn(&mut r, 512, 1);
        let b = Tensor::randn(&mut r, 512, 1);
        let t = hsic_permutation_test(&a, &b, 200, trial, Exec::default()).unwrap();
        if !t.rejects_independence() {
            passes += 1;
        }
    }
    assert!(passes >= 45, "{passes}/50");
}

#[test]
fn permutation_test_is_exec_independent() {
    let a = Tensor::randn(&mut rng(21), 64, 2);
    let b = Tensor::randn(&mut rng(22), 64, 1);
    let s = hsic_permutation_test(&a, &b, 50, 3, Exec::Sequential).unwrap();
    let p = hsic_permutation_test(&a, &b, 50, 3, Exec::Parallel).unwrap();
    assert_eq!(s, p);
}

#[test]
fn hsic_gradient() {
    let x = Tensor::randn(&mut rng(23), 8, 2);
    let b = Tensor::randn(&mut rng(24), 8, 1);
    let err = grad_check(
        |t, v| {
            let bv = t.constant(b.clone());
            let y = t.tanh(v)?;
            let y0 = t.select_cols(y, &[0])?;
            let dep = t.add(bv, y0)?;
            hsic_on_tape(t, y, dep)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn hsic_rejects_tiny_batches() {
    let a = Tensor::randn(&mut rng(25), 3, 1);
    assert!(matches!(hsic(&a, &a), Err(Error::Invalid(_))));
}

fn parts_on(tape: &mut Tape, vals: [f64; 5]) -> LossParts {
    let v: Vec<Var> = vals.iter().map(|&x| tape.scalar(x)).collect();
    LossParts {
        recon: v[0],
        kl: v[1],
        sup: v[2],
        cons: Some(v[3]),
        hsic: v[4],
    }
}

#[test]
fn total_loss_examples() {
    let mut tape = Tape::new();
    let parts = parts_on(&mut tape, [0.5, 2.0, 0.01, 0.3, 0.05]);
    let t = total_loss(&mut tape, &parts, &LossWeights::recon_only()).unwrap();
    assert_eq!(tape.value(t).item(), 0.5);
    let w = LossWeights::default();
    assert_eq!((w.beta, w.gamma, w.lambda1, w.lambda2, w.lambda3), (0.1, 3000.0, 1.0, 10.0, 1.0));
    let t1 = total_loss(&mut tape, &parts, &w).unwrap();
    let t1 = tape.value(t1).item();
    assert!((t1 - (0.5 + 0.2 + 0.3 + 30.0 + 0.05)).abs() < 1e-12);
    let w2 = LossWeights {
        beta: 0.2,
        gamma: 6000.0,
        lambda: 2.0,
        nu: 2.0,
        ..w
    };
    let t2 = total_loss(&mut tape, &parts, &w2).unwrap();
    let t2 = tape.value(t2).item();
    assert!(((t2 - 0.5) - 2.0 * (t1 - 0.5)).abs() < 1e-12);
}

#[test]
fn weights_validate() {
    assert!(LossWeights::default().validate().is_ok());
    let bad = LossWeights {
        nu: -1.0,
        ..LossWeights::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn softplus_reference() {
    assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    let _ = PI;
}
