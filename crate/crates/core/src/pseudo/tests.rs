use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nets::{ExaminerNetwork, NetConfig};

fn records(entropies: &[f64]) -> Vec<ConfidenceRecord> {
    entropies
        .iter()
        .enumerate()
        .map(|(i, &e)| ConfidenceRecord {
            sample_index: i,
            entropy: e,
            pseudo_label: 0,
        })
        .collect()
}

/// Independent statement of the ordering rules used as the test oracle.
fn oracle(t: &Triplet, y: &[usize], literal: bool) -> bool {
    if t.anchor == t.first || t.anchor == t.second || t.first == t.second {
        return false;
    }
    let same_b = y[t.first] == y[t.anchor];
    let same_c = y[t.second] == y[t.anchor];
    match t.label {
        0 => same_b && !same_c,
        1 if literal => same_b && same_c,
        1 => same_c && !same_b,
        _ => false,
    }
}

#[test]
fn entropy_examples() {
    assert_eq!(entropy_bits(&[0.0f64, 1.0, 0.0]).unwrap(), 0.0);
    let u = vec![1.0 / 12.0; 12];
    assert!((entropy_bits(&u).unwrap() - 12f64.log2()).abs() < 1e-12);
    assert!((entropy_bits(&[0.5f64, 0.25, 0.25]).unwrap() - 1.5).abs() < 1e-15);
    assert!(entropy_bits(&[0.5f64, 0.4]).is_err());
    assert!(entropy_bits(&[1.5f64, -0.5]).is_err());
}

#[test]
fn curriculum_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let e: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..2.0)).collect();
    let recs = records(&e);
    let first = curriculum_select(&recs, 0, 5).unwrap();
    assert_eq!(first.len(), 50);
    let mut sorted = e.clone();
    sorted.sort_by(f64::total_cmp);
    let cutoff = sorted[49];
    assert!(first.iter().all(|&i| e[i] <= cutoff));
    assert_eq!(curriculum_select(&recs, 4, 5).unwrap().len(), 100);

    let sel = curriculum_select(&records(&[0.1, 0.1, 0.9]), 0, 3).unwrap();
    assert_eq!(sel, vec![0, 1]);
    assert!(curriculum_select(&[], 0, 3).is_err());
    assert!(curriculum_select(&recs, 5, 5).is_err());
}

#[test]
fn curriculum_count_is_exact() {
    assert_eq!(curriculum_count(3, 1, 4), 2); // 3 * 4/6 = 2 exactly
    assert_eq!(curriculum_count(2000, 0, 10), 1000);
    assert_eq!(curriculum_count(2000, 9, 10), 2000);
    assert_eq!(curriculum_count(7, 0, 1), 4);
}

#[test]
fn pseudo_label_examples() {
    let t = Tensor::new([3, 3], vec![0.0f64, 1.0, 0.0, 0.4, 0.4, 0.2, 0.1, 0.2, 0.7]).unwrap();
    assert_eq!(assign_pseudo_labels(&t), vec![1, 0, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = Tensor::from_fn([50, 4], |_| rng.gen_range(-1.0f64..1.0));
    let got = assign_pseudo_labels(&r);
    for i in 0..50 {
        let row = r.row(i);
        let mut best = 0;
        for k in 1..4 {
            if row[k] > row[best] {
                best = k;
            }
        }
        assert_eq!(got[i], best);
    }
}

#[test]
fn triplets_two_classes() {
    let labels = [0, 0, 1, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let set = construct_triplets(&[0, 1, 2, 3], &labels, 2, TripletRule::Corrected, &mut rng).unwrap();
    assert_eq!(set.labels(), vec![0, 1]);
    // enumerate every valid triplet for each label and check membership
    let valid = |label: u8| -> Vec<Triplet> {
        let mut v = Vec::new();
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    let t = Triplet {
                        anchor: a,
                        first: b,
                        second: c,
                        label,
                    };
                    if oracle(&t, &labels, false) {
                        v.push(t);
                    }
                }
            }
        }
        v
    };
    assert!(valid(0).contains(&set.triplets[0]));
    assert!(valid(1).contains(&set.triplets[1]));
    assert_eq!(valid(0).len(), 8);
}

#[test]
fn triplets_need_diversity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let err = construct_triplets(&[0, 1, 2], &[1, 1, 1], 4, TripletRule::Corrected, &mut rng).unwrap_err();
    assert!(matches!(err, Error::TripletInfeasible { ref histogram } if histogram == &vec![(1, 3)]));
    // two singleton classes: no anchor with a same-class mate
    assert!(construct_triplets(&[0, 1], &[0, 1], 2, TripletRule::Corrected, &mut rng).is_err());
    // literal rule needs a class with three members for label 1
    assert!(construct_triplets(&[0, 1, 2, 3], &[0, 0, 1, 1], 2, TripletRule::Literal, &mut rng).is_err());
}

#[test]
fn triplet_csv_export() {
    let set = TripletSet {
        triplets: vec![Triplet {
            anchor: 3,
            first: 1,
            second: 7,
            label: 1,
        }],
        rule: TripletRule::Corrected,
    };
    let mut buf = Vec::new();
    set.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "a,b,c,label\n3,1,7,1\n");
}

#[test]
fn base_correlation_examples() {
    let f = Tensor::new([3, 2], vec![1.0f64, 0.0, 2.0, 0.0, 0.0, 3.0]).unwrap();
    let c = correlation_matrix_base(&f, true).unwrap();
    assert!((c.get(0, 1) - 1.0).abs() < 1e-12);
    assert!((c.get(0, 2) - 0.5).abs() < 1e-12);
    let raw = correlation_matrix_base(&f, false).unwrap();
    assert!(raw.get(0, 2).abs() < 1e-12);
}

#[test]
fn base_correlation_matches_pairwise_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = Tensor::from_fn([8, 16], |_| rng.gen_range(-1.0f64..1.0));
    let c = correlation_matrix_base(&f, true).unwrap();
    for i in 0..8 {
        for j in 0..8 {
            let (a, b) = (f.row(i), f.row(j));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let want = (1.0 + dot / (na * nb)) / 2.0;
            assert!((c.get(i, j) - want).abs() < 1e-9);
        }
        assert!((c.get(i, i) - 1.0).abs() < 1e-6);
    }
}

#[test]
fn examiner_correlation_range_and_shape() {
    let mut cfg = NetConfig::desk(3);
    cfg.height = 8;
    cfg.width = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ex = ExaminerNetwork::<f64>::new(cfg, &mut rng).unwrap();
    let batch = Tensor::from_fn([2, 1, 8, 8], |_| rng.gen_range(0.0..1.0));
    let c = correlation_matrix_examiner(&ex, &batch, &AugmentConfig::default(), &mut rng).unwrap();
    assert_eq!(c.values.shape(), &[2, 2]);
    assert_eq!(c.source, CorrelationSource::Examiner);
    assert!(c.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let one = Tensor::from_fn([1, 1, 8, 8], |_| 0.5);
    assert!(correlation_matrix_examiner(&ex, &one, &AugmentConfig::default(), &mut rng).is_err());
}

#[test]
fn augment_identity_shape_and_reproducibility() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img: Vec<f32> = (0..2 * 6 * 5).map(|_| rng.gen_range(0.0..1.0)).collect();
    let id = augment(&img, [2, 6, 5], &AugmentConfig::identity(), &mut rng).unwrap();
    assert_eq!(id, img);
    let cfg = AugmentConfig::default();
    let a = augment(&img, [2, 6, 5], &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = augment(&img, [2, 6, 5], &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), img.len());
    let (lo, hi) = img.iter().fold((1.0f32, 0.0f32), |(l, h), &v| (l.min(v), h.max(v)));
    assert!(a.iter().all(|&v| v >= lo && v <= hi));
    assert!(augment(&img, [1, 6, 5], &cfg, &mut rng).is_err());
}

proptest! {
    #[test]
    fn curriculum_is_monotone_and_nested(
        entropies in prop::collection::vec(0.0f64..3.0, 1..60),
        total in 1usize..8,
    ) {
        let recs = records(&entropies);
        let mut prev: Vec<usize> = Vec::new();
        for stage in 0..total {
            let sel = curriculum_select(&recs, stage, total).unwrap();
            prop_assert!(sel.len() >= prev.len());
            prop_assert!(prev.iter().all(|i| sel.contains(i)));
            prev = sel;
        }
    }

    #[test]
    fn entropy_bounded_by_log_k(raw in prop::collection::vec(0.0f64..1.0, 2..12)) {
        let s: f64 = raw.iter().sum();
        prop_assume!(s > 1e-6);
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let h = entropy_bits(&p).unwrap();
        prop_assert!(h >= -1e-12);
        prop_assert!(h <= (p.len() as f64).log2() + 1e-9);
    }

    #[test]
    fn emitted_triplets_satisfy_rule(
        labels in prop::collection::vec(0usize..4, 6..40),
        seed in 0u64..1000,
        literal in any::<bool>(),
    ) {
        let rule = if literal { TripletRule::Literal } else { TripletRule::Corrected };
        let selected: Vec<usize> = (0..labels.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Ok(set) = construct_triplets(&selected, &labels, 50, rule, &mut rng) {
            prop_assert_eq!(set.len(), 50);
            for t in &set.triplets {
                prop_assert!(oracle(t, &labels, literal));
                prop_assert!(satisfies_rule(t, &labels, rule));
            }
        }
    }
}
