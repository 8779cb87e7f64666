use super::*;
use crate::data_synth::{generate_domain_pair, DomainDataset, GeneratorConfig, ShiftConfig};
use crate::nets::{BaseNetwork, ExaminerNetwork};
use crate::tensor::Tensor;

fn tiny_data(seed: u64, classes: usize, n: usize) -> (DomainDataset, DomainDataset) {
    generate_domain_pair(&GeneratorConfig {
        num_classes: classes,
        n_source: n,
        n_target: n,
        height: 12,
        width: 12,
        shift: ShiftConfig::benchmark(),
        seed,
    })
    .unwrap()
}

fn quick(variant: Variant) -> AdaptationConfig {
    AdaptationConfig {
        variant,
        batch_size: 8,
        source_epochs: 2,
        adapt_epochs: 2,
        examiner_passes: 1,
        examiner_pretrain_epochs: 1,
        ..AdaptationConfig::default()
    }
}

#[test]
fn zero_epochs_leave_the_network_unchanged() {
    let (s, t) = tiny_data(1, 3, 48);
    let cfg = AdaptationConfig {
        adapt_epochs: 0,
        ..quick(Variant::Cin)
    };
    let pre = Pretrained::<f64>::train(&s, &cfg).unwrap();
    let out = run_from_pretrained(&pre, &t, &cfg).unwrap();
    assert_eq!(out.base.named_params(), pre.base.named_params());
    assert!(out.report.epochs.is_empty());
    assert_eq!(out.report.final_accuracy, out.report.initial_accuracy);
}

#[test]
fn runs_are_deterministic() {
    let (s, t) = tiny_data(2, 3, 48);
    let cfg = quick(Variant::Cin);
    let a = run_experiment::<f32>(&s, &t, &cfg).unwrap().report;
    let b = run_experiment::<f32>(&s, &t, &cfg).unwrap().report;
    assert!(a.same_numerics(&b));
}

#[test]
fn degenerate_cin_replays_shot() {
    let (s, t) = tiny_data(3, 3, 48);
    let cfg = quick(Variant::Cin);
    let pre = Pretrained::<f32>::train(&s, &cfg).unwrap();
    let shot = run_from_pretrained(&pre, &t, &cfg.for_variant(Variant::Shot)).unwrap();
    let bare = run_from_pretrained(&pre, &t, &cfg.with_terms(false, false)).unwrap();
    assert_eq!(shot.base, bare.base);
    assert_eq!(shot.report.final_accuracy, bare.report.final_accuracy);
    assert_eq!(shot.report.accuracy_trajectory, bare.report.accuracy_trajectory);
}

#[test]
fn adaptation_never_reads_target_labels_or_moves_the_head() {
    let (s, t) = tiny_data(4, 3, 48);
    for variant in [Variant::SourceOnly, Variant::Shot, Variant::Cin, Variant::CinPretrained] {
        let cfg = quick(variant);
        let report = run_experiment::<f32>(&s, &t, &cfg).unwrap().report;
        assert_eq!(report.label_reads_during_adaptation, 0, "{variant:?}");
        assert!(report.head_unchanged, "{variant:?}");
    }
}

#[test]
fn first_stage_selects_half_and_last_selects_all() {
    let (s, t) = tiny_data(5, 3, 45);
    let cfg = AdaptationConfig {
        adapt_epochs: 3,
        ..quick(Variant::Cin)
    };
    let report = run_experiment::<f32>(&s, &t, &cfg).unwrap().report;
    let selected: Vec<usize> = report.stages.iter().map(|s| s.selected).collect();
    assert_eq!(selected.first(), Some(&23));
    assert_eq!(selected.last(), Some(&45));
    assert!(selected.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn evaluation_counts_and_confusion() {
    let e = eval::score(&[0, 1, 1, 2, 2, 2], &[0, 1, 2, 2, 2, 0], 3);
    assert!((e.accuracy - 4.0 / 6.0).abs() < 1e-12);
    assert_eq!(e.confusion, vec![vec![1, 0, 1], vec![0, 1, 0], vec![0, 1, 2]]);
    assert_eq!(e.per_class_accuracy, vec![0.5, 1.0, 2.0 / 3.0]);
    let perfect = eval::score(&[0, 1, 2], &[0, 1, 2], 3);
    assert_eq!(perfect.accuracy, 1.0);
}

#[test]
fn confusion_rows_sum_to_class_counts() {
    let (_, t) = tiny_data(6, 4, 64);
    let net = BaseNetwork::<f32>::new(train::net_config(&t).unwrap(), &mut AdaptationConfig::default().rng(1)).unwrap();
    let e = evaluate(&net, &t).unwrap();
    let counts = t.class_counts().unwrap();
    for (row, &c) in e.confusion.iter().zip(&counts) {
        assert_eq!(row.iter().sum::<usize>(), c);
    }
    assert!((0.0..=1.0).contains(&e.accuracy));
}

#[test]
fn evaluate_needs_labels() {
    let (_, t) = tiny_data(7, 2, 16);
    let unlabeled = DomainDataset::new(t.images().clone(), None, t.domain, 2, String::new()).unwrap();
    let net = BaseNetwork::<f32>::new(train::net_config(&t).unwrap(), &mut AdaptationConfig::default().rng(1)).unwrap();
    assert!(evaluate(&net, &unlabeled).is_err());
}

#[test]
fn projection_shape_order_and_collapse() {
    let feats = Tensor::from_fn([30, 4], |i| {
        let (r, c) = (i / 4, i % 4);
        [3.0, 1.0, 0.2, 0.0][c] * ((r as f64 * 0.7 + c as f64).sin())
    });
    let p = feature_projection(&feats).unwrap();
    assert_eq!(p.coords.len(), 30);
    assert!(p.variance[0] >= p.variance[1]);

    let same = Tensor::from_fn([10, 3], |i| [0.5, -1.0, 2.0][i % 3]);
    let q = feature_projection(&same).unwrap();
    assert!(q.coords.iter().all(|c| c[0].abs() < 1e-9 && c[1].abs() < 1e-9));
    assert!(feature_projection(&Tensor::<f64>::zeros([0, 3])).is_err());
}

#[test]
fn projection_csv_has_a_row_per_sample() {
    let (_, t) = tiny_data(8, 3, 30);
    let net = BaseNetwork::<f32>::new(train::net_config(&t).unwrap(), &mut AdaptationConfig::default().rng(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("proj.csv");
    export_feature_projection(&net, &t, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "pc1,pc2,label");
    assert_eq!(lines.len(), 31);
}

#[test]
fn examiner_learns_to_order_two_clusters() {
    // Two well separated classes: chance is 0.5.
    let (s, _) = generate_domain_pair(&GeneratorConfig {
        num_classes: 2,
        n_source: 200,
        n_target: 4,
        height: 12,
        width: 12,
        shift: ShiftConfig::none(),
        seed: 9,
    })
    .unwrap();
    let cfg = AdaptationConfig {
        examiner_pretrain_epochs: 8,
        ..quick(Variant::CinPretrained)
    };
    let ex = ExaminerNetwork::<f32>::new(train::net_config(&s).unwrap(), &mut cfg.rng(streams::EXAMINER_INIT)).unwrap();
    let ex = pretrain_examiner_source(ex, &s, &cfg).unwrap();
    let labels = s.training_labels().unwrap();
    let all: Vec<usize> = (0..s.len()).collect();
    let held = crate::pseudo::construct_triplets(&all, labels, 400, cfg.triplet_rule(), &mut cfg.rng(99)).unwrap();
    let acc = examiner_triplet_accuracy(&ex, s.images(), &held.triplets).unwrap();
    assert!(acc >= 0.75, "triplet accuracy {acc}");
}

#[test]
fn config_validation() {
    assert!(AdaptationConfig::default().validate().is_ok());
    let shot_with_switch = AdaptationConfig {
        variant: Variant::Shot,
        enable_ac: false,
        ..AdaptationConfig::default()
    };
    assert!(shot_with_switch.validate().is_err());
    assert!(shot_with_switch.for_variant(Variant::Shot).validate().is_ok());
    for bad in [
        AdaptationConfig {
            batch_size: 1,
            ..AdaptationConfig::default()
        },
        AdaptationConfig {
            adapt_lr: 0.0,
            ..AdaptationConfig::default()
        },
        AdaptationConfig {
            momentum: 1.0,
            ..AdaptationConfig::default()
        },
        AdaptationConfig {
            lambda1: f64::NAN,
            ..AdaptationConfig::default()
        },
        AdaptationConfig {
            total_stages: Some(0),
            ..AdaptationConfig::default()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn config_json_round_trip_and_unknown_fields() {
    let cfg = AdaptationConfig {
        seed: 17,
        lambda2: 3.5,
        ..AdaptationConfig::default()
    };
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<AdaptationConfig>(&text).unwrap(), cfg);
    assert!(serde_json::from_str::<AdaptationConfig>(r#"{"lambda3": 1}"#).is_err());
    let partial: AdaptationConfig = serde_json::from_str(r#"{"variant": "shot"}"#).unwrap();
    assert_eq!(partial.variant, Variant::Shot);
    assert_eq!(partial.batch_size, AdaptationConfig::default().batch_size);
}

#[test]
fn variant_names_parse_back() {
    for v in [Variant::SourceOnly, Variant::Shot, Variant::Cin, Variant::CinPretrained] {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert!("cin2".parse::<Variant>().is_err());
}

#[test]
fn report_round_trips_through_json() {
    let (s, t) = tiny_data(10, 3, 40);
    let report = run_experiment::<f32>(&s, &t, &quick(Variant::Shot)).unwrap().report;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    report.save(&path).unwrap();
    assert_eq!(RunReport::load(&path).unwrap(), report);
}

#[test]
fn ablation_table_shape() {
    let data = GeneratorConfig {
        num_classes: 3,
        n_source: 36,
        n_target: 36,
        height: 12,
        width: 12,
        shift: ShiftConfig::benchmark(),
        seed: 0,
    };
    let cfg = AdaptationConfig {
        adapt_epochs: 1,
        ..quick(Variant::Cin)
    };
    assert!(ablation_run::<f32>(&data, &cfg, &[0, 1]).is_err());
    let table = ablation_run::<f32>(&data, &cfg, &[0, 1, 2]).unwrap();
    let names: Vec<&str> = table.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["full", "w/o AC", "w/o CMC", "baseline"]);
    assert!(table.rows.iter().all(|r| r.accuracies.len() == 3));
    assert!(table.per_seed.iter().all(|r| r.label_reads == 0 && r.heads_unchanged));

    // The baseline row is plain SHOT on the same data and source model.
    let seed = 1;
    let (s, t) = generate_domain_pair(&GeneratorConfig { seed, ..data.clone() }).unwrap();
    let c = AdaptationConfig { seed, ..cfg.clone() };
    let shot = run_experiment::<f32>(&s, &t, &c.for_variant(Variant::Shot)).unwrap();
    assert_eq!(table.row("baseline").unwrap().accuracies[1], shot.report.final_accuracy);

    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("variant,mean,std,seed_0,seed_1,seed_2"));
}

#[test]
fn summary_statistics() {
    let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
    assert!((s.mean - 2.5).abs() < 1e-12);
    assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(Summary::of(&[0.7]).std, 0.0);
}
