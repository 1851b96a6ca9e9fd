use super::*;
use crate::numerics::grad_check;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_raw(rng: &mut ChaCha8Rng, layout: &BlockLayout) -> (Vec<f64>, Vec<f64>) {
    let mu = (0..layout.total_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let raw = (0..layout.chol_dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
    (mu, raw)
}

fn split(layout: &BlockLayout, flat: &[f64]) -> Vec<Vec<f64>> {
    layout
        .dims()
        .iter()
        .enumerate()
        .map(|(k, &d)| flat[layout.offset(k)..layout.offset(k) + d].to_vec())
        .collect()
}

/// Generic dense MVN log-pdf: inverse and determinant by LU.
fn dense_logpdf(post: &BlockGaussian, z: &[f64]) -> f64 {
    let n = z.len();
    let mut sigma = DMatrix::<f64>::zeros(n, n);
    let mut mu = DVector::<f64>::zeros(n);
    let mut o = 0;
    for (m, l) in post.mu.iter().zip(&post.chol) {
        let d = m.len();
        let lm = DMatrix::from_fn(d, d, |i, j| l.get(i, j));
        let s = &lm * lm.transpose();
        for i in 0..d {
            mu[o + i] = m[i];
            for j in 0..d {
                sigma[(o + i, o + j)] = s[(i, j)];
            }
        }
        o += d;
    }
    let diff = DVector::from_column_slice(z) - mu;
    let lu = sigma.clone().lu();
    let inv = lu.try_inverse().unwrap();
    let quad = (diff.transpose() * inv * &diff)[(0, 0)];
    -0.5 * quad - 0.5 * ((2.0 * PI).powi(n as i32) * sigma.determinant()).ln()
}

#[test]
fn zero_raw_gives_softplus_diagonal() {
    let l = build_cholesky(&Tensor::zeros(2, 2)).unwrap();
    let expect = 2f64.ln() + 1e-4;
    assert!((l.get(0, 0) - expect).abs() < 1e-15);
    assert!((l.get(1, 1) - 0.6932).abs() < 1e-4);
    assert_eq!(l.get(0, 1), 0.0);
    assert_eq!(l.get(1, 0), 0.0);
}

#[test]
fn upper_triangle_is_ignored() {
    let a = Tensor::matrix(2, 2, vec![0.3, 5.0, -0.2, 0.7]).unwrap();
    let b = Tensor::matrix(2, 2, vec![0.3, -9.0, -0.2, 0.7]).unwrap();
    assert_eq!(build_cholesky(&a).unwrap(), build_cholesky(&b).unwrap());
}

#[test]
fn scalar_factor_value() {
    let l = build_cholesky(&Tensor::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
    assert!((l.item() - 3.0486).abs() < 1e-4, "{}", l.item());
}

#[test]
fn tape_factor_matches_value_path() {
    let layout = BlockLayout::new(&[2, 1, 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (_, raw) = random_raw(&mut rng, &layout);
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::row(&raw));
    let l = build_cholesky_on_tape(&mut tape, &layout, r).unwrap();
    let flat = tape.value(l).clone();
    let blocks = BlockGaussian::from_raw(&layout, &vec![0.0; 6], &raw).unwrap();
    for (k, c) in blocks.chol.iter().enumerate() {
        let o = layout.chol_offset(k);
        assert_eq!(&flat.data()[o..o + c.numel()], c.data());
    }
}

#[test]
fn sampling_examples() {
    let layout = BlockLayout::new(&[2, 1]).unwrap();
    let post = BlockGaussian::from_raw(&layout, &[1.0, 2.0, 3.0], &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
    let z = post.sample(&[vec![0.0, 0.0], vec![0.0]]).unwrap();
    assert_eq!(z, vec![vec![1.0, 2.0], vec![3.0]]);
    let ident = BlockGaussian {
        mu: vec![vec![1.0, 2.0]],
        chol: vec![Tensor::eye(2)],
    };
    assert_eq!(ident.sample(&[vec![0.5, -0.5]]).unwrap(), vec![vec![1.5, 1.5]]);
    assert!(ident.sample(&[vec![0.5]]).is_err());
}

#[test]
fn batched_sample_matches_blocks() {
    let layout = BlockLayout::new(&[2, 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut tape = Tape::new();
    let rows = 4;
    let mut mus = Vec::new();
    let mut raws = Vec::new();
    for _ in 0..rows {
        let (m, r) = random_raw(&mut rng, &layout);
        mus.push(m);
        raws.push(r);
    }
    let eps = Tensor::randn(&mut rng, rows, 5);
    let mu = tape.constant(Tensor::from_rows(&mus).unwrap());
    let raw = tape.constant(Tensor::from_rows(&raws).unwrap());
    let chol = build_cholesky_on_tape(&mut tape, &layout, raw).unwrap();
    let post = PosteriorVars { mu, chol };
    let z = sample_on_tape(&mut tape, &layout, post, &eps).unwrap();
    let lq = log_density_on_tape(&mut tape, &layout, post, &eps).unwrap();
    for r in 0..rows {
        let g = BlockGaussian::from_raw(&layout, &mus[r], &raws[r]).unwrap();
        let e = split(&layout, eps.row_slice(r));
        let zr: Vec<f64> = g.sample(&e).unwrap().concat();
        for (a, b) in zr.iter().zip(tape.value(z).row_slice(r)) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((g.log_density(&e) - tape.value(lq).get(r, 0)).abs() < 1e-12);
    }
}

#[test]
fn standard_normal_at_mode() {
    let g = BlockGaussian {
        mu: vec![vec![0.0]],
        chol: vec![Tensor::eye(1)],
    };
    assert!((g.log_density(&[vec![0.0]]) + 0.918939).abs() < 1e-6);
}

#[test]
fn log_density_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let k = rng.random_range(1..=4);
        let dims: Vec<usize> = (0..k).map(|_| rng.random_range(1..=3)).collect();
        let layout = BlockLayout::new(&dims).unwrap();
        let (mu, raw) = random_raw(&mut rng, &layout);
        let g = BlockGaussian::from_raw(&layout, &mu, &raw).unwrap();
        let eps: Vec<Vec<f64>> = dims
            .iter()
            .map(|&d| Tensor::randn(&mut rng, 1, d).into_data())
            .collect();
        let z = g.sample(&eps).unwrap().concat();
        let a = g.log_density(&eps);
        let b = dense_logpdf(&g, &z);
        assert!((a - b).abs() < 1e-8, "{a} vs {b} for dims {dims:?}");
    }
}

#[test]
fn independent_blocks_factorize() {
    let layout = BlockLayout::new(&[2, 2]).unwrap();
    let raw = [0.2, 0.0, -0.4, 0.1, 0.5, 0.0, 0.3, -0.6];
    let g = BlockGaussian::from_raw(&layout, &[0.0; 4], &raw).unwrap();
    let eps = [vec![0.3, -1.2], vec![0.7, 0.1]];
    let parts: f64 = (0..2)
        .map(|k| {
            BlockGaussian {
                mu: vec![g.mu[k].clone()],
                chol: vec![g.chol[k].clone()],
            }
            .log_density(&eps[k..k + 1])
        })
        .sum();
    assert!((g.log_density(&eps) - parts).abs() < 1e-14);
}

#[test]
fn diagonal_case_is_a_diagonal_vae() {
    let layout = BlockLayout::new(&[1, 1, 1]).unwrap();
    let mu = [0.5, -1.0, 2.0];
    let raw = [0.3, -0.7, 1.1];
    let g = BlockGaussian::from_raw(&layout, &mu, &raw).unwrap();
    let eps = [vec![0.2], vec![-1.3], vec![0.8]];
    let z = g.sample(&eps).unwrap().concat();
    let mut expect = 0.0;
    for i in 0..3 {
        let s = softplus(raw[i]) + DIAG_FLOOR;
        assert_eq!(z[i], mu[i] + s * eps[i][0]);
        expect += -0.5 * (2.0 * PI).ln() - s.ln() - 0.5 * ((z[i] - mu[i]) / s).powi(2);
    }
    assert!((g.log_density(&eps) - expect).abs() < 1e-12);
}

#[test]
fn monte_carlo_covariance_is_block_diagonal() {
    let layout = BlockLayout::new(&[2, 2]).unwrap();
    let raw = [0.4, 0.0, 0.8, -0.3, -0.2, 0.0, -0.5, 0.9];
    let g = BlockGaussian::from_raw(&layout, &[0.0; 4], &raw).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let mut acc = [[0.0f64; 4]; 4];
    for _ in 0..n {
        let e = Tensor::randn(&mut rng, 1, 4).into_data();
        let z = g.sample(&split(&layout, &e)).unwrap().concat();
        for i in 0..4 {
            for j in 0..4 {
                acc[i][j] += z[i] * z[j];
            }
        }
    }
    let mut expect = [[0.0f64; 4]; 4];
    for (k, l) in g.chol.iter().enumerate() {
        let o = layout.offset(k);
        for i in 0..2 {
            for j in 0..2 {
                expect[o + i][o + j] = (0..2).map(|t| l.get(i, t) * l.get(j, t)).sum();
            }
        }
    }
    for i in 0..4 {
        for j in 0..4 {
            let c = acc[i][j] / n as f64;
            assert!((c - expect[i][j]).abs() < 0.02, "({i},{j}) {c} vs {}", expect[i][j]);
        }
    }
}

#[test]
fn log_density_gradient_wrt_encoder_outputs() {
    let layout = BlockLayout::new(&[2, 1, 2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let rows = 3;
    let eps = Tensor::randn(&mut rng, rows, layout.total_dim());
    let width = layout.total_dim() + layout.chol_dim();
    let x = Tensor::matrix(
        rows,
        width,
        (0..rows * width).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let d = layout.total_dim();
    let c = layout.chol_dim();
    let err = grad_check(
        |tape, v| {
            let mu = tape.slice_cols(v, 0, d)?;
            let raw = tape.slice_cols(v, d, c)?;
            let chol = build_cholesky_on_tape(tape, &layout, raw)?;
            let post = PosteriorVars { mu, chol };
            let z = sample_on_tape(tape, &layout, post, &eps)?;
            let lq = log_density_on_tape(tape, &layout, post, &eps)?;
            let zz = tape.square(z)?;
            let a = tape.sum(zz)?;
            let b = tape.sum(lq)?;
            tape.add(a, b)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn encoder_shapes() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let enc = EncoderNet::new(&mut store, 20, 16, &[2; 6], &mut rng).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&mut rng, 5, 20));
    let p = enc.forward(&mut tape, &store, x).unwrap();
    assert_eq!(tape.shape(p.mu), &[5, 12]);
    assert_eq!(tape.shape(p.chol), &[5, 24]);
    let v = tape.value(p.chol);
    for r in 0..5 {
        for k in 0..6 {
            let o = enc.layout.chol_offset(k);
            assert_eq!(v.get(r, o + 1), 0.0);
            assert!(v.get(r, o) >= DIAG_FLOOR && v.get(r, o + 3) >= DIAG_FLOOR);
        }
    }
}
