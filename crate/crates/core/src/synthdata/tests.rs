use super::*;

fn gaussian_spec(mean: f64, sigma: f64) -> Vec<FactorSpec> {
    vec![FactorSpec::new("a", Distribution::Gaussian { mean, sigma })]
}

fn small_cfg(records: usize) -> DataConfig {
    DataConfig {
        records,
        ..DataConfig::default()
    }
}

/// Plain 1-D Lloyd iterations started from the extremes; only for checks here.
fn two_means(v: &[f64]) -> (f64, f64) {
    let mut lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..50 {
        let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0.0, 0.0, 0.0);
        for &x in v {
            if (x - lo).abs() <= (x - hi).abs() {
                s0 += x;
                n0 += 1.0;
            } else {
                s1 += x;
                n1 += 1.0;
            }
        }
        lo = s0 / n0;
        hi = s1 / n1;
    }
    (lo, hi)
}

#[test]
fn bimodal_position_cluster_means() {
    let spec = vec![FactorSpec::new(
        "position",
        Distribution::Mixture {
            components: vec![(0.5, 1.1, 0.05), (0.5, 1.8, 0.05)],
        },
    )];
    let rows = sample_factors(&spec, 10_000, 0, Exec::default()).unwrap();
    let v: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let (lo, hi) = two_means(&v);
    assert!((lo - 1.1).abs() < 0.02, "{lo}");
    assert!((hi - 1.8).abs() < 0.02, "{hi}");
}

#[test]
fn gaussian_factor_law_of_large_numbers() {
    let rows = sample_factors(&gaussian_spec(0.6, 0.1), 100_000, 3, Exec::default()).unwrap();
    let v: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    assert!((mean - 0.6).abs() < 1e-3, "{mean}");
    assert!((var.sqrt() - 0.1).abs() < 1e-3, "{}", var.sqrt());
}

#[test]
fn uniform_factor_stays_in_bounds() {
    let spec = vec![FactorSpec::new("size", Distribution::Uniform { low: 0.5, high: 1.5 })];
    let rows = sample_factors(&spec, 5000, 9, Exec::default()).unwrap();
    assert!(rows.iter().all(|r| (0.5..1.5).contains(&r[0])));
    let mean = rows.iter().map(|r| r[0]).sum::<f64>() / 5000.0;
    assert!((mean - 1.0).abs() < 0.02);
}

#[test]
fn mechanisms_are_exact() {
    let scm = GroundTruthScm::filter(Variant::Standard, 20, 0.01, 1);
    let u = apply_mechanisms(&[vec![1.0, 1.5, 0.4, 0.5]], &scm).unwrap();
    assert_eq!(u[0][4], 1.0 * 3.0 / 1.5);
    assert_eq!(u[0][5], 0.4 * 0.5);
    let ds = generate(&small_cfg(500), Exec::default()).unwrap();
    for r in &ds.records {
        assert!((r.u[4] - r.u[0] * 3.0 / (3.0 - r.u[1])).abs() < 1e-12);
        assert!((r.u[5] - r.u[2] * r.u[3]).abs() < 1e-12);
    }
}

#[test]
fn projection_rejects_light_height() {
    let scm = GroundTruthScm::filter(Variant::Standard, 20, 0.01, 1);
    let err = apply_mechanisms(&[vec![1.0, 3.0, 0.4, 0.5]], &scm).unwrap_err();
    assert!(matches!(err, Error::Domain { .. }));
}

#[test]
fn zero_mixer_yields_pure_noise() {
    let mut scm = GroundTruthScm::filter(Variant::Standard, 4, 0.0, 1);
    scm.mixer = Mixer::zeros(6, 8, 4);
    let x = mix_to_observation(&[vec![0.0; 6]], &scm, 0, Exec::Sequential);
    assert_eq!(x[0], vec![0.0; 4]);
    scm.noise_sigma = 0.01;
    let x = mix_to_observation(&vec![vec![0.0; 6]; 2000], &scm, 0, Exec::Sequential);
    let flat: Vec<f64> = x.into_iter().flatten().collect();
    let sd = (flat.iter().map(|v| v * v).sum::<f64>() / flat.len() as f64).sqrt();
    assert!((sd - 0.01).abs() < 5e-4, "{sd}");
}

#[test]
fn mixer_separates_distinct_factors() {
    let ds = generate(&small_cfg(1000), Exec::default()).unwrap();
    let mut seen = std::collections::HashSet::new();
    for r in &ds.records {
        let key: Vec<u64> = r.x.iter().map(|v| v.to_bits()).collect();
        assert!(seen.insert(key));
    }
    // different factors map to clearly different noiseless observations
    let scm = GroundTruthScm::filter(Variant::Standard, 20, 0.0, 1);
    let a = scm.mixer.apply(&ds.records[0].u);
    let b = scm.mixer.apply(&ds.records[1].u);
    let d: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    assert!(d > 0.01, "{d}");
}

#[test]
fn generation_is_deterministic_and_exec_independent() {
    let a = generate(&small_cfg(300), Exec::Sequential).unwrap();
    let b = generate(&small_cfg(300), Exec::Parallel).unwrap();
    assert_eq!(a, b);
    // row i does not depend on the total count
    let c = generate(&small_cfg(100), Exec::Sequential).unwrap();
    assert_eq!(a.records[..100], c.records[..]);
    let d = generate(
        &DataConfig {
            seed: 1,
            ..small_cfg(100)
        },
        Exec::Sequential,
    )
    .unwrap();
    assert_ne!(c.records, d.records);
}

#[test]
fn zero_records_rejected() {
    assert!(matches!(
        sample_factors(&gaussian_spec(0.0, 1.0), 0, 0, Exec::Sequential),
        Err(Error::Invalid(_))
    ));
}

#[test]
fn invalid_distributions_rejected() {
    let bad = [
        Distribution::Gaussian { mean: 0.0, sigma: 0.0 },
        Distribution::Mixture { components: vec![] },
        Distribution::Mixture {
            components: vec![(0.4, 0.0, 1.0)],
        },
        Distribution::Uniform { low: 1.0, high: 1.0 },
    ];
    for d in bad {
        assert!(d.validate().is_err(), "{d:?}");
    }
}

#[test]
fn file_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    let ds = generate(&small_cfg(50), Exec::default()).unwrap();
    save(&ds, &path).unwrap();
    assert!(manifest_path(&path).exists());
    let back = load(&path).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn empty_file_reads_as_no_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    assert!(read_dataset(&path).unwrap().is_empty());
}

#[test]
fn truncated_line_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"x\":[1.0],\"u\":[2.0]}\n{\"x\":[1.0],\"u\":[2\n").unwrap();
    match read_dataset(&path).unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 2),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn strong_variant_changes_only_position() {
    let a = filter_root_specs(Variant::Standard);
    let b = filter_root_specs(Variant::StrongBimodal);
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        assert_eq!(x == y, i != 1, "{}", x.name);
    }
}
