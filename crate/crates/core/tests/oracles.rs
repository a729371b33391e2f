use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vispref::cluster::{estimate_bandwidth, soft_assign, ClusterModel};
use vispref::compare::{delta_variance, log_odds_delta, pairwise_max_z, z_scores, PriorConfig};
use vispref::evaluate::{average_precision, mrr, rank_candidates, LabeledItem, RankingOutcome};
use vispref::profile::{build_profile, BackgroundDistribution, UserProfile};
use vispref::synth::oracle;

fn gaussian_points(rng: &mut ChaCha8Rng, n: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    scale * z
                })
                .collect()
        })
        .collect()
}

#[test]
fn bandwidth_fast_path_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let pts = gaussian_points(&mut rng, 50, 4, 3.0);
        let fast = estimate_bandwidth(&pts).unwrap();
        let slow = oracle::bandwidth_pairwise(&pts);
        assert!((fast - slow).abs() < 1e-9 * slow.max(1.0), "{fast} vs {slow}");
    }
}

#[test]
fn soft_assign_matches_literal_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let centers = gaussian_points(&mut rng, 6, 3, 2.0);
        let alpha_sq = rng.random_range(0.5..4.0);
        let cutoff = rng.random_range(1.0..5.0);
        let model = ClusterModel::new(centers.clone(), alpha_sq, cutoff, 0).unwrap();
        let d = gaussian_points(&mut rng, 1, 3, 2.0).remove(0);
        let fast = soft_assign(&d, &model).unwrap();
        let slow = oracle::soft_assign(&d, &centers, alpha_sq, cutoff);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn log_odds_pipeline_matches_term_by_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let k = rng.random_range(2..10);
        let ci: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..20.0)).collect();
        let cj: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..20.0)).collect();
        let bg: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..50.0)).collect();
        let alpha = rng.random_range(0.01..2.0);
        let b = BackgroundDistribution { counts: bg.clone() };
        let p = PriorConfig::new(alpha).unwrap();
        let d = log_odds_delta(&ci, &cj, &b, &p).unwrap();
        let v = delta_variance(&ci, &cj, &b, &p).unwrap();
        let z = z_scores(&d, &v).unwrap();
        let (od, ov, oz) = (
            oracle::log_odds_delta(&ci, &cj, &bg, alpha),
            oracle::delta_variance(&ci, &cj, &bg, alpha),
            oracle::z_scores(&ci, &cj, &bg, alpha),
        );
        for i in 0..k {
            assert!((d[i] - od[i]).abs() < 1e-12, "{} vs {}", d[i], od[i]);
            assert!((v[i] - ov[i]).abs() < 1e-12);
            assert!((z[i] - oz[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn profile_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let a: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let p = build_profile("u", a.iter().map(Vec::as_slice)).unwrap();
        let (raw, norm) = oracle::profile(&a);
        for i in 0..5 {
            assert!((p.raw_counts[i] - raw[i]).abs() < 1e-9);
            assert!((p.normalized[i] - norm[i]).abs() < 1e-9);
        }
    }
}

#[test]
fn ap_and_mrr_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.random_range(5..40);
        let vectors = gaussian_points(&mut rng, n, 2, 1.0);
        let labels: Vec<String> = (0..n).map(|_| format!("l{}", rng.random_range(0..3))).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("id{i:03}")).collect();
        let items: Vec<LabeledItem> = (0..n)
            .map(|i| LabeledItem {
                id: ids[i].clone(),
                label: labels[i].clone(),
                vector: vectors[i].clone(),
            })
            .collect();
        let q = rng.random_range(0..n);
        let fast = average_precision(q, &items).unwrap();
        let slow = oracle::average_precision(q, &vectors, &labels, &ids);
        match (fast, slow) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
            (None, None) => {}
            other => panic!("{other:?}"),
        }

        // ranks, including exact ties from quantized profiles
        let profiles: Vec<UserProfile> = (0..n)
            .map(|i| UserProfile {
                user_id: ids[i].clone(),
                raw_counts: vec![0.0; 2],
                normalized: vectors[i].iter().map(|v| (v * 2.0).round()).collect(),
                mass: 1.0,
                degenerate: false,
            })
            .collect();
        let t = rng.random_range(0..n);
        let r = rank_candidates(&profiles[q], &profiles, &ids[t]).unwrap().rank;
        let vecs: Vec<Vec<f64>> = profiles.iter().map(|p| p.normalized.clone()).collect();
        assert_eq!(r, oracle::rank(&profiles[q].normalized, &vecs, t));

        let ranks: Vec<usize> = (0..n).map(|_| rng.random_range(1..=n)).collect();
        let outcomes: Vec<RankingOutcome> = ranks
            .iter()
            .map(|&rank| RankingOutcome {
                user_id: String::new(),
                rank,
                n_candidates: n,
            })
            .collect();
        assert!((mrr(&outcomes).unwrap() - oracle::mrr(&ranks)).abs() < 1e-9);
    }
}

#[test]
fn prior_strength_shrinks_log_odds() {
    let b = BackgroundDistribution { counts: vec![1.0, 1.0] };
    let weak = log_odds_delta(&[8.0, 2.0], &[2.0, 8.0], &b, &PriorConfig::new(1.0).unwrap()).unwrap();
    let strong = log_odds_delta(&[8.0, 2.0], &[2.0, 8.0], &b, &PriorConfig::new(10.0).unwrap()).unwrap();
    for (s, w) in strong.iter().zip(&weak) {
        assert!(s.abs() <= w.abs());
    }
    assert!((weak[0] - 2.197_224_577_336_219_4).abs() < 1e-12);
}

fn counts(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..30.0, k)
}

proptest! {
    #[test]
    fn antisymmetry_and_symmetric_zmax(
        (ci, cj, bg) in (2usize..8).prop_flat_map(|k| (counts(k), counts(k), prop::collection::vec(0.5f64..20.0, k))),
        alpha in 0.05f64..3.0,
    ) {
        let b = BackgroundDistribution { counts: bg };
        let p = PriorConfig::new(alpha).unwrap();
        let dij = log_odds_delta(&ci, &cj, &b, &p).unwrap();
        let dji = log_odds_delta(&cj, &ci, &b, &p).unwrap();
        for (a, c) in dij.iter().zip(&dji) {
            prop_assert!((a + c).abs() < 1e-12);
        }
        let zij = z_scores(&dij, &delta_variance(&ci, &cj, &b, &p).unwrap()).unwrap();
        let zji = z_scores(&dji, &delta_variance(&cj, &ci, &b, &p).unwrap()).unwrap();
        prop_assert!((pairwise_max_z(&zij).unwrap().0 - pairwise_max_z(&zji).unwrap().0).abs() < 1e-12);
        let same = log_odds_delta(&ci, &ci, &b, &p).unwrap();
        let zs = z_scores(&same, &delta_variance(&ci, &ci, &b, &p).unwrap()).unwrap();
        prop_assert_eq!(pairwise_max_z(&zs).unwrap().0, 0.0);
    }

    #[test]
    fn profile_permutation_and_scale_invariant(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..12),
        s in 0.1f64..10.0,
    ) {
        let p = build_profile("u", rows.iter().map(Vec::as_slice)).unwrap();
        let rev = build_profile("u", rows.iter().rev().map(Vec::as_slice)).unwrap();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
        let sp = build_profile("u", scaled.iter().map(Vec::as_slice)).unwrap();
        prop_assert!((p.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..4 {
            prop_assert!((p.normalized[i] - rev.normalized[i]).abs() < 1e-12);
            if !p.degenerate {
                prop_assert!((p.normalized[i] - sp.normalized[i]).abs() < 1e-12);
                prop_assert!((p.raw_counts[i] - p.normalized[i] * p.mass).abs() < 1e-9);
            }
        }
        if !p.degenerate {
            prop_assert!((sp.mass - s * p.mass).abs() < 1e-9 * sp.mass.max(1.0));
        }
        // disjoint union adds raw counts
        let (left, right) = rows.split_at(rows.len() / 2);
        if !left.is_empty() {
            let l = build_profile("u", left.iter().map(Vec::as_slice)).unwrap();
            let r = build_profile("u", right.iter().map(Vec::as_slice)).unwrap();
            for i in 0..4 {
                prop_assert!((l.raw_counts[i] + r.raw_counts[i] - p.raw_counts[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bandwidth_translation_and_scale(
        pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..30),
        shift in prop::collection::vec(-100.0f64..100.0, 3),
        s in 0.1f64..10.0,
    ) {
        prop_assume!(pts.iter().any(|p| p != &pts[0]));
        let base = estimate_bandwidth(&pts).unwrap();
        let moved: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let scaled: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|a| a * s).collect()).collect();
        prop_assert!((estimate_bandwidth(&moved).unwrap() - base).abs() < 1e-9 * base.max(1.0));
        prop_assert!((estimate_bandwidth(&scaled).unwrap() - s * s * base).abs() < 1e-9 * (s * s * base).max(1.0));
    }

    #[test]
    fn soft_assign_monotone_in_distance(
        centers in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..8),
        d in prop::collection::vec(-3.0f64..3.0, 2),
        alpha_sq in 0.1f64..5.0,
        cutoff in 0.5f64..6.0,
    ) {
        let model = ClusterModel::new(centers.clone(), alpha_sq, cutoff, 0).unwrap();
        let w = soft_assign(&d, &model).unwrap();
        let dist: Vec<f64> = centers.iter().map(|c| vispref::linalg::euclidean(c, &d)).collect();
        for i in 0..w.len() {
            prop_assert!((0.0..=1.0).contains(&w[i]));
            prop_assert_eq!(w[i] == 0.0, dist[i] > cutoff);
            for j in 0..w.len() {
                if dist[i] < dist[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn ap_invariant_under_monotone_transform_and_relabeling(
        pts in prop::collection::vec((prop::collection::vec(-3.0f64..3.0, 2), 0usize..3), 3..25),
        q in 0usize..25,
    ) {
        let q = q % pts.len();
        let items: Vec<LabeledItem> = pts.iter().enumerate().map(|(i, (v, l))| LabeledItem {
            id: format!("{i:03}"), label: format!("l{l}"), vector: v.clone() }).collect();
        let renamed: Vec<LabeledItem> = items.iter().map(|it| LabeledItem { label: format!("x{}", it.label), ..it.clone() }).collect();
        prop_assert_eq!(average_precision(q, &items).unwrap(), average_precision(q, &renamed).unwrap());
        // ranking on squared distance (a strictly monotone transform) yields the same AP
        let mut order: Vec<(f64, &LabeledItem)> = items.iter().enumerate().filter(|(i, _)| *i != q)
            .map(|(_, it)| (vispref::linalg::squared_distance(&items[q].vector, &it.vector), it)).collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.id.cmp(&b.1.id)));
        let rel: Vec<bool> = order.iter().map(|(_, it)| it.label == items[q].label).collect();
        prop_assert_eq!(vispref::evaluate::average_precision_of_ranking(&rel), average_precision(q, &items).unwrap());
    }

    #[test]
    fn contrastive_loss_properties(
        x in prop::collection::vec(-2.0f64..2.0, 3),
        y in prop::collection::vec(-2.0f64..2.0, 3),
        m in 0.1f64..3.0,
    ) {
        use vispref::metric::contrastive_loss;
        let d = vispref::linalg::euclidean(&x, &y);
        for similar in [true, false] {
            let l = contrastive_loss(&x, &y, similar, m);
            prop_assert!(l >= 0.0);
            let zero = if similar { d == 0.0 } else { d >= m };
            prop_assert_eq!(l == 0.0, zero);
            prop_assert_eq!(l, contrastive_loss(&y, &x, similar, m));
        }
        prop_assert_eq!(contrastive_loss(&x, &x, true, m), 0.0);
    }

    #[test]
    fn ecdf_is_a_step_cdf(values in prop::collection::vec(-10.0f64..10.0, 1..50)) {
        let steps = vispref::compare::ecdf(&values).unwrap();
        prop_assert_eq!(steps.last().unwrap().1, 1.0);
        for w in steps.windows(2) {
            prop_assert!(w[0].0 < w[1].0 && w[0].1 < w[1].1);
        }
        for (v, f) in &steps {
            let le = values.iter().filter(|x| *x <= v).count() as f64 / values.len() as f64;
            prop_assert!((le - f).abs() < 1e-12);
        }
    }

    #[test]
    fn mrr_in_unit_interval_and_permutation_invariant(ranks in prop::collection::vec(1usize..50, 1..30)) {
        let outcomes: Vec<RankingOutcome> = ranks.iter().map(|&rank| RankingOutcome { user_id: String::new(), rank, n_candidates: 50 }).collect();
        let mut rev = outcomes.clone();
        rev.reverse();
        let a = mrr(&outcomes).unwrap();
        prop_assert!(a > 0.0 && a <= 1.0);
        prop_assert!((a - mrr(&rev).unwrap()).abs() < 1e-12);
    }
}
