use super::*;

fn spec(n: usize) -> ClusterSpec {
    ClusterSpec {
        n_clusters: n,
        d: 8,
        points_per_cluster: 100,
        center_separation: 4.0,
        noise_sigma: 0.4,
        seed: 0,
    }
}

fn brute_nearest(x: &[f64], centers: &Tensor) -> usize {
    let mut best = (f64::INFINITY, 0);
    for c in 0..centers.rows() {
        let d: f64 = x.iter().zip(centers.row(c)).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

fn target_energy(y: &Tensor, per_cluster: usize) -> f64 {
    y.data().iter().map(|v| v * v).sum::<f64>() / per_cluster as f64
}

#[test]
fn zero_noise_points_sit_on_their_centers() {
    let c = generate_clusters(&ClusterSpec { noise_sigma: 0.0, ..spec(3) }).unwrap();
    for (p, &l) in c.labels.iter().enumerate() {
        assert_eq!(c.points.row(p), c.centers.row(l));
    }
    assert_eq!(nearest_center_labels(&c.points, &c.centers).unwrap(), c.labels);
}

#[test]
fn single_cluster_labels_are_zero() {
    let c = generate_clusters(&spec(1)).unwrap();
    assert!(c.labels.iter().all(|&l| l == 0));
    assert_eq!(c.centers.shape(), &[1, 8]);
}

#[test]
fn centers_respect_the_separation() {
    let c = generate_clusters(&ClusterSpec { n_clusters: 6, ..spec(6) }).unwrap();
    for a in 0..6 {
        for b in a + 1..6 {
            let d: f64 = c.centers.row(a).iter().zip(c.centers.row(b)).map(|(x, y)| (x - y) * (x - y)).sum();
            assert!(d.sqrt() >= 4.0);
        }
    }
}

#[test]
fn ten_sigma_clusters_are_labelled_almost_perfectly() {
    let s = ClusterSpec {
        n_clusters: 4,
        points_per_cluster: 2500,
        center_separation: 4.0,
        noise_sigma: 0.4,
        ..spec(4)
    };
    let c = generate_clusters(&s).unwrap();
    let labels = nearest_center_labels(&c.points, &c.centers).unwrap();
    let mut hits = 0;
    for (p, &l) in labels.iter().enumerate() {
        assert_eq!(l, brute_nearest(c.points.row(p), &c.centers));
        hits += usize::from(l == c.labels[p]);
    }
    assert!(hits as f64 / 10_000.0 > 0.999, "accuracy {}", hits as f64 / 10_000.0);
}

#[test]
fn impossible_placement_is_rejected_with_advice() {
    let s = ClusterSpec { n_clusters: 20, d: 1, center_separation: 1.0, ..spec(20) };
    let err = generate_clusters(&s).unwrap_err().to_string();
    assert!(err.contains("lower n_clusters or raise d"), "{err}");
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(ClusterSpec { center_separation: 0.0, ..spec(2) }.validate().is_err());
    assert!(ClusterSpec { noise_sigma: -0.1, ..spec(2) }.validate().is_err());
    assert!(ClusterSpec { noise_sigma: f64::NAN, ..spec(2) }.validate().is_err());
    assert!(ClusterSpec { n_clusters: 0, ..spec(2) }.validate().is_err());
    assert!(spec(2).validate().is_ok());
}

#[test]
fn generation_is_deterministic_per_seed() {
    assert_eq!(generate_clusters(&spec(3)).unwrap(), generate_clusters(&spec(3)).unwrap());
    assert_ne!(
        generate_clusters(&spec(3)).unwrap().points,
        generate_clusters(&ClusterSpec { seed: 1, ..spec(3) }).unwrap().points
    );
}

#[test]
fn permuting_centers_permutes_labels() {
    let c = generate_clusters(&spec(4)).unwrap();
    let perm = [2, 0, 3, 1];
    let rows: Vec<f64> = perm.iter().flat_map(|&i| c.centers.row(i).to_vec()).collect();
    let permuted = Tensor::new(vec![4, 8], rows).unwrap();
    let before = nearest_center_labels(&c.points, &c.centers).unwrap();
    let after = nearest_center_labels(&c.points, &permuted).unwrap();
    for (b, a) in before.iter().zip(&after) {
        assert_eq!(perm[*a], *b);
    }
}

#[test]
fn permutations_enumerate_every_ordering_once() {
    for n in 1..=5 {
        let ps = permutations(n);
        let expected: usize = (1..=n).product();
        assert_eq!(ps.len(), expected);
        assert_eq!(ps[0], (0..n).collect::<Vec<_>>());
        let mut sorted = ps.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), expected);
        for p in &ps {
            let mut q = p.clone();
            q.sort();
            assert_eq!(q, (0..n).collect::<Vec<_>>());
        }
    }
}

#[test]
fn linear_targets_apply_the_cluster_map() {
    let c = generate_clusters(&spec(2)).unwrap();
    let maps = random_maps(2, 8, 3);
    let y = linear_targets(&c, &maps).unwrap();
    let p = 150;
    let (x, a) = (c.points.row(p), &maps[c.labels[p]]);
    for j in 0..8 {
        let mut acc = 0.0;
        for i in 0..8 {
            acc += x[i] * a.data()[i * 8 + j];
        }
        assert!((y.row(p)[j] - acc).abs() < 1e-12);
    }
    assert!(linear_targets(&c, &maps[..1]).is_err());
}

#[test]
fn identity_assignment_wins_on_three_clusters() {
    let c = generate_clusters(&spec(3)).unwrap();
    let y = linear_targets(&c, &random_maps(3, 8, 1)).unwrap();
    let r = oracle_assignment_check(&c, &y, &OracleConfig::default()).unwrap();
    assert_eq!(r.rows.len(), 6);
    assert!(r.identity_strictly_minimal(), "margin {}", r.margin());
    let best = r.rows.iter().map(|row| row.total_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(best, r.identity_loss());
}

#[test]
fn swapping_two_experts_does_not_help() {
    let c = generate_clusters(&spec(2)).unwrap();
    let y = linear_targets(&c, &random_maps(2, 8, 5)).unwrap();
    let r = oracle_assignment_check(&c, &y, &OracleConfig::default()).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert_eq!(r.rows[1].perm, vec![1, 0]);
    assert!(r.rows[1].total_loss >= r.rows[0].total_loss);
}

#[test]
fn shared_target_ties_when_experts_generalize() {
    let c = generate_clusters(&spec(3)).unwrap();
    let shared = random_maps(1, 8, 1).remove(0);
    let cfg = OracleConfig { activation: Activation::Identity, ..Default::default() };
    let y = linear_targets(&c, &vec![shared; 3]).unwrap();
    let tol = 1e-3 * target_energy(&y, 100);
    let tied = oracle_assignment_check(&c, &y, &cfg).unwrap();
    assert!(tied.spread() <= tol, "spread {} tol {tol}", tied.spread());

    let y = linear_targets(&c, &random_maps(3, 8, 1)).unwrap();
    let distinct = oracle_assignment_check(&c, &y, &cfg).unwrap();
    assert!(distinct.spread() > 1e-3 * target_energy(&y, 100));
    assert!(distinct.identity_strictly_minimal());
}

#[test]
fn oracle_is_reproducible() {
    let c = generate_clusters(&spec(2)).unwrap();
    let y = linear_targets(&c, &random_maps(2, 8, 5)).unwrap();
    let cfg = OracleConfig { warmup_steps: 50, steps: 5, ..Default::default() };
    assert_eq!(
        oracle_assignment_check(&c, &y, &cfg).unwrap(),
        oracle_assignment_check(&c, &y, &cfg).unwrap()
    );
}

#[test]
fn oracle_refuses_more_than_six_experts() {
    let s = ClusterSpec { n_clusters: 7, d: 16, points_per_cluster: 4, ..spec(7) };
    let c = generate_clusters(&s).unwrap();
    let err = oracle_assignment_check(&c, &c.points.clone(), &OracleConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn vq_arm_is_always_consistent() {
    let c = generate_clusters(&ClusterSpec { center_separation: 2.0, ..spec(3) }).unwrap();
    let series = router_inconsistency_run(&c, &InconsistencyConfig { every: 10, ..Default::default() }).unwrap();
    assert_eq!(series.len(), 41);
    assert_eq!(series.last().unwrap().step, 400);
    for r in &series {
        assert_eq!(r.vq_consistency, 1.0, "step {}", r.step);
    }
    match first_dip(&series) {
        Some(r) => println!("router inconsistent at step {}: {:.4}", r.step, r.router_consistency),
        None => println!("router stayed consistent after step 0"),
    }
}

#[test]
fn frozen_features_let_the_router_converge() {
    let c = generate_clusters(&spec(3)).unwrap();
    let cfg = InconsistencyConfig {
        freeze_features: true,
        lr: 3e-2,
        steps: 1000,
        every: 100,
        ..Default::default()
    };
    let series = router_inconsistency_run(&c, &cfg).unwrap();
    assert!(series.iter().all(|r| r.feature_drift == 0.0));
    assert_eq!(series.last().unwrap().router_consistency, 1.0);
}

#[test]
fn series_and_report_csvs_have_fixed_headers() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        SeriesRow { step: 0, router_consistency: 0.5, vq_consistency: 1.0, feature_drift: 0.0 },
        SeriesRow { step: 10, router_consistency: 1.0, vq_consistency: 1.0, feature_drift: 0.1 },
    ];
    write_thm1_csv(&dir.path().join("thm1_series.csv"), &rows).unwrap();
    let text = std::fs::read_to_string(dir.path().join("thm1_series.csv")).unwrap();
    assert_eq!(text, "step,router_consistency,vq_consistency\n0,0.5,1\n10,1,1\n");

    let report = OracleReport {
        rows: vec![
            PermutationLoss { perm: vec![0, 1], total_loss: 0.25 },
            PermutationLoss { perm: vec![1, 0], total_loss: 2.0 },
        ],
    };
    write_prop1_csv(&dir.path().join("prop1_report.csv"), &report).unwrap();
    let text = std::fs::read_to_string(dir.path().join("prop1_report.csv")).unwrap();
    assert_eq!(text, "permutation,total_loss\n0-1,0.25\n1-0,2\n");
    assert_eq!(report.margin(), 1.75);
}
