//! Round semantics, pooled-data equivalence, permissions, churn and phases.

use fedsilo::datagen::{generate_bundles, DatasetBundle, GenConfig, Variant};
use fedsilo::federation::oracle::{PooledBatch, PooledOracle};
use fedsilo::federation::{
    build_plan, parse_transcript, run_phase, ChurnEvent, ChurnKind, ChurnPolicy, Envelope, FaultPlan, FedConfig,
    Federation, FederationError, ForbiddenKind, ForbiddenSend, MessageKind, PartnerSetup, Phase, TestSchedule,
    read_metrics_csv, write_metrics_csv, MetricRow, AGGREGATOR,
};
use fedsilo::primitives::Seed;
use fedsilo::secagg::WeightingScheme;

fn bundles(p: usize, variant: Variant, seed: u64) -> Vec<DatasetBundle> {
    generate_bundles(&Seed::from_u64(seed), &GenConfig::bench(p, variant)).unwrap()
}

fn cfg() -> FedConfig {
    FedConfig {
        epochs: 2,
        batches_per_epoch: 4,
        lr: 0.3,
        hidden: vec![16],
        ..FedConfig::default()
    }
}

fn setups(b: &[DatasetBundle], folds: &[u8]) -> Vec<PartnerSetup> {
    b.iter()
        .enumerate()
        .map(|(i, b)| PartnerSetup {
            id: i as u32,
            bundle: b.clone(),
            train_rows: b.rows_in_folds(folds),
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn trunks_agree_after_every_round() {
    let b = bundles(3, Variant::Cls, 1);
    let mut fed = Federation::new(cfg(), Seed::from_u64(2), setups(&b, &[0, 1, 2])).unwrap();
    for _ in 0..3 {
        fed.run_round().unwrap();
        let trunks: Vec<Vec<f64>> = fed.partners().map(|p| p.params.trunk_flat()).collect();
        assert!(trunks.windows(2).all(|w| w[0] == w[1]));
    }
    let heads: Vec<Vec<f64>> = fed.partners().map(|p| p.params.head_flat()).collect();
    assert_ne!(heads[0], heads[1]);
}

fn pooled_equivalence(p: usize, rounds: usize, variant: Variant, seed: u64) -> f64 {
    let b = bundles(p, variant, seed);
    let c = FedConfig {
        weighting: WeightingScheme::DataProportional,
        ..cfg()
    };
    let mut fed = Federation::new(c.clone(), Seed::from_u64(seed + 1), setups(&b, &[0, 1, 2, 3])).unwrap();
    let start = fed.partner(0).unwrap().params.clone();
    let mut oracle = PooledOracle::new(&start, fed.partners().map(|p| p.params.head.clone()).collect());
    let mut worst: f64 = 0.0;
    for _ in 0..rounds {
        let batches: Vec<PooledBatch<'_>> = fed
            .partners()
            .map(|s| {
                let rows = s.batch_rows(s.cursor(), c.batches_per_epoch);
                PooledBatch {
                    x: s.bundle.x.select_rows(&rows).unwrap(),
                    labels: s.bundle.labels.select_rows(&rows).unwrap(),
                    tasks: &s.bundle.tasks,
                }
            })
            .collect();
        oracle.step(&batches, c.lr).unwrap();
        drop(batches);
        fed.run_round().unwrap();
        for s in fed.partners() {
            worst = worst.max(max_abs_diff(&s.params.trunk_flat(), &oracle.trunk.trunk_flat()));
        }
    }
    worst
}

#[test]
fn dense_rounds_follow_pooled_sgd() {
    for p in 1..=4 {
        let rounds = 6;
        let worst = pooled_equivalence(p, rounds, Variant::Cls, 10 + p as u64);
        let bound = (rounds * p) as f64 * 2f64.powi(-20);
        assert!(worst <= bound, "P={p}: {worst:e} > {bound:e}");
    }
    let worst = pooled_equivalence(2, 4, Variant::Hyb, 30);
    assert!(worst <= 8.0 * 2f64.powi(-20), "HYB: {worst:e}");
}

#[test]
fn single_partner_matches_plain_sgd() {
    let b = bundles(1, Variant::Cls, 40);
    let c = cfg();
    let mut fed = Federation::new(c.clone(), Seed::from_u64(41), setups(&b, &[0, 1, 2])).unwrap();
    let mut plain = fed.partner(0).unwrap().params.clone();
    for _ in 0..4 {
        let s = fed.partner(0).unwrap();
        let rows = s.batch_rows(s.cursor(), c.batches_per_epoch);
        let x = s.bundle.x.select_rows(&rows).unwrap();
        let y = s.bundle.labels.select_rows(&rows).unwrap();
        let (_, g) = fedsilo::model::backward(&plain, &x, &y, &s.bundle.tasks).unwrap();
        plain = plain.apply_update(&g.trunk_grad, &g.head_grad, c.lr).unwrap();
        fed.run_round().unwrap();
    }
    let got = &fed.partner(0).unwrap().params;
    // the only difference is fixed-point rounding of the trunk delta
    assert!(max_abs_diff(&got.trunk_flat(), &plain.trunk_flat()) <= 4.0 * 2f64.powi(-20));
    assert!(max_abs_diff(&got.head_flat(), &plain.head_flat()) <= 4.0 * 2f64.powi(-20));
}

#[test]
fn sparse_rounds_leave_other_coordinates_untouched() {
    let b = bundles(2, Variant::Cls, 50);
    let c = FedConfig { k_fraction: 0.5, ..cfg() };
    let mut fed = Federation::new(c, Seed::from_u64(51), setups(&b, &[0, 1, 2])).unwrap();
    for _ in 0..3 {
        let before = fed.partner(0).unwrap().params.trunk_flat();
        let report = fed.run_round().unwrap();
        let after = fed.partner(0).unwrap().params.trunk_flat();
        assert_eq!(report.coords.len(), before.len() / 2);
        let inside: std::collections::BTreeSet<u64> = report.coords.iter().copied().collect();
        for t in 0..before.len() {
            if !inside.contains(&(t as u64)) {
                assert_eq!(before[t].to_bits(), after[t].to_bits(), "coord {t} moved");
            }
        }
    }
}

#[test]
fn catalogue_head_stays_inside_the_catalogue_group() {
    let mut g = GenConfig::bench(3, Variant::Cls);
    g.raw.n_catalogue_tasks = 2;
    g.raw.catalogue_rate = 0.5;
    g.catalogue_partners = vec![0, 2];
    let b = generate_bundles(&Seed::from_u64(60), &g).unwrap();
    let mut fed = Federation::new(cfg(), Seed::from_u64(61), setups(&b, &[0, 1, 2])).unwrap();
    let before = fed.partner(0).unwrap().params.catalogue_flat().unwrap();
    for _ in 0..3 {
        fed.run_round().unwrap();
    }
    assert!(fed.partner(1).unwrap().params.catalogue_head.is_none());
    let c0 = fed.partner(0).unwrap().params.catalogue_flat().unwrap();
    let c2 = fed.partner(2).unwrap().params.catalogue_flat().unwrap();
    assert_eq!(c0, c2);
    assert_ne!(c0, before);
    let env = parse_transcript(fed.bus().transcript()).unwrap();
    assert!(env
        .iter()
        .filter(|e| matches!(e.kind, MessageKind::MaskedCatalogue | MessageKind::AggregateCatalogue))
        .all(|e| e.from != 1 && e.to != 1));
}

#[test]
fn missing_partner_aborts_without_state_change() {
    let b = bundles(3, Variant::Cls, 70);
    let mut c = cfg();
    c.faults = FaultPlan {
        drop_submissions: vec![(1, 2)],
        forbidden: vec![],
    };
    let mut fed = Federation::new(c, Seed::from_u64(71), setups(&b, &[0, 1, 2])).unwrap();
    fed.run_round().unwrap();
    let params: Vec<_> = fed.partners().map(|p| (p.params.clone(), p.cursor())).collect();
    let len = fed.bus().transcript_len();
    let err = fed.run_round().unwrap_err();
    assert!(matches!(err, FederationError::MissingPartner { round: 1, expected: 3, got: 2 }), "{err}");
    assert_eq!(fed.round(), 1);
    let after: Vec<_> = fed.partners().map(|p| (p.params.clone(), p.cursor())).collect();
    assert_eq!(params, after);
    let tail = parse_transcript(&fed.bus().transcript()[len..]).unwrap();
    assert!(tail.iter().all(|e| e.kind == MessageKind::Abort));
    assert_eq!(tail.len(), 3);
}

#[test]
fn forbidden_messages_are_denied() {
    let b = bundles(2, Variant::Cls, 80);
    for kind in [
        ForbiddenKind::FullModel,
        ForbiddenKind::HeadWeights,
        ForbiddenKind::DataRows,
        ForbiddenKind::AttributedScore,
        ForbiddenKind::PeerUpdate,
    ] {
        let mut c = cfg();
        c.faults.forbidden = vec![ForbiddenSend { round: 0, partner: 1, kind }];
        let mut fed = Federation::new(c, Seed::from_u64(81), setups(&b, &[0, 1, 2])).unwrap();
        let err = fed.run_round().unwrap_err();
        assert!(matches!(err, FederationError::Permission(_)), "{kind:?}: {err}");
        assert_eq!(fed.bus().violations().len(), 1);
    }
}

#[test]
fn transcript_is_replayable_and_carries_no_data() {
    let b = bundles(2, Variant::ClsAux, 90);
    let run = || {
        let mut fed = Federation::new(cfg(), Seed::from_u64(91), setups(&b, &[0, 1, 2])).unwrap();
        for _ in 0..3 {
            fed.run_round().unwrap();
        }
        fed.test(0, 3).unwrap();
        fed.bus().transcript().to_vec()
    };
    let (t1, t2) = (run(), run());
    assert_eq!(t1, t2);
    let env = parse_transcript(&t1).unwrap();
    assert!(env.iter().all(|e| !matches!(
        e.kind,
        MessageKind::DataRows | MessageKind::FullModel | MessageKind::HeadWeights
    )));
    assert!(env.iter().any(|e| e.kind == MessageKind::TestScore && e.to == AGGREGATOR));
}

#[test]
fn allowed_messages_are_delivered() {
    let b = bundles(2, Variant::Cls, 95);
    let mut fed = Federation::new(cfg(), Seed::from_u64(96), setups(&b, &[0, 1, 2])).unwrap();
    let before = fed.bus().delivered();
    for (from, to, kind) in [(0, AGGREGATOR, MessageKind::Algorithm), (AGGREGATOR, 1, MessageKind::MetricDefinition)] {
        fed.send(Envelope {
            round: 0,
            from,
            to,
            kind,
            payload: b"logistic".to_vec(),
        })
        .unwrap();
    }
    assert_eq!(fed.bus().delivered(), before + 2);
}

#[test]
fn churn_rekeys_and_changes_cohort_everywhere() {
    let b = bundles(5, Variant::Cls, 100);
    let mut c = cfg();
    c.churn = ChurnPolicy { min_group_size: 2 };
    let mut fed = Federation::new(c, Seed::from_u64(101), setups(&b[..3], &[0, 1, 2])).unwrap();
    fed.run_round().unwrap();
    let join = ChurnEvent {
        kind: ChurnKind::Join,
        partners: vec![3, 4],
        at_phase_boundary: true,
    };
    let joiners = |ids: &[usize]| -> Vec<PartnerSetup> {
        ids.iter()
            .map(|&i| PartnerSetup {
                id: i as u32,
                bundle: b[i].clone(),
                train_rows: b[i].rows_in_folds(&[0, 1, 2]),
            })
            .collect()
    };
    // mid-phase: rejected
    assert!(!fed.request_churn(&join, joiners(&[3, 4])).unwrap().accepted());
    fed.begin_phase();
    let single = ChurnEvent {
        partners: vec![3],
        ..join.clone()
    };
    assert!(!fed.request_churn(&single, joiners(&[3])).unwrap().accepted());
    let old_seed = fed.partner(0).unwrap().keys().trunk.common_seed;
    assert!(fed.request_churn(&join, joiners(&[3, 4])).unwrap().accepted());
    assert_eq!(fed.cohort(), vec![0, 1, 2, 3, 4]);
    assert_eq!(fed.server_view().epoch, 1);
    assert_ne!(fed.partner(0).unwrap().keys().trunk.common_seed, old_seed);
    assert_eq!(fed.partner(3).unwrap().params.trunk, fed.partner(0).unwrap().params.trunk);
    let r = fed.run_round().unwrap();
    assert_eq!(r.totals.n_partners, 5);
    assert_eq!(r.cohort, vec![0, 1, 2, 3, 4]);
    let trunks: Vec<_> = fed.partners().map(|p| p.params.trunk_flat()).collect();
    assert!(trunks.windows(2).all(|w| w[0] == w[1]));

    fed.begin_phase();
    let leave = ChurnEvent {
        kind: ChurnKind::Leave,
        partners: vec![0, 4],
        at_phase_boundary: true,
    };
    assert!(fed.request_churn(&leave, vec![]).unwrap().accepted());
    let r = fed.run_round().unwrap();
    assert_eq!(r.totals.n_partners, 3);
    assert_eq!(fed.server_view().cohort, vec![1, 2, 3]);
}

#[test]
fn phases_split_folds_and_final_phase_is_silent() {
    let b = bundles(2, Variant::Cls, 110);
    let c = FedConfig {
        epochs: 1,
        batches_per_epoch: 2,
        ..cfg()
    };
    let tests = TestSchedule::final_only();
    let total: usize = b.iter().map(|b| b.n_rows()).sum();
    let fold_sizes: Vec<usize> = (0..5u8).map(|f| b.iter().map(|b| b.rows_in_folds(&[f]).len()).sum()).collect();
    let max_fold = *fold_sizes.iter().max().unwrap() as f64;
    for (phase, share) in [(Phase::Tune, 0.6), (Phase::Retrain, 0.8), (Phase::Final, 1.0)] {
        let out = run_phase(&c, &Seed::from_u64(111), &b, phase, &tests).unwrap();
        let rows: usize = out.train_rows.values().sum();
        assert!((rows as f64 - share * total as f64).abs() <= max_fold, "{phase:?}: {rows} of {total}");
        assert_eq!(out.metrics.is_empty(), phase == Phase::Final);
    }
}

#[test]
fn plan_execution_respects_dependencies() {
    let b = bundles(2, Variant::Cls, 120);
    let c = FedConfig {
        epochs: 1,
        batches_per_epoch: 3,
        ..cfg()
    };
    let tests = TestSchedule {
        every_rounds: 1,
        partners: vec![],
    };
    let plan = build_plan(&[0, 1], 1, 3, Phase::Tune, &tests).unwrap();
    let mut fed = Federation::new(c, Seed::from_u64(121), setups(&b, &Phase::Tune.train_folds())).unwrap();
    let executed = fed.execute(&plan, Some(3)).unwrap();
    assert_eq!(executed.len(), plan.nodes.len());
    let mut pos = vec![0; executed.len()];
    for (k, &id) in executed.iter().enumerate() {
        pos[id] = k;
    }
    assert!(plan.edges.iter().all(|&(a, b)| pos[a] < pos[b]));
    assert_eq!(fed.round(), 3);
    let anon: std::collections::BTreeSet<_> = fed.public_scores().iter().map(|r| r.partner_anon_id.clone()).collect();
    assert_eq!(anon.len(), 2);
    assert!(anon.iter().all(|a| a.starts_with("anon-")));
}

#[test]
fn invalid_config_names_the_field() {
    let b = bundles(1, Variant::Cls, 130);
    let c = FedConfig { k_fraction: 0.0, ..cfg() };
    match Federation::new(c, Seed::from_u64(1), setups(&b, &[0])) {
        Err(FederationError::Config { field, .. }) => assert_eq!(field, "k_fraction"),
        Err(e) => panic!("unexpected {e}"),
        Ok(_) => panic!("accepted a zero subset"),
    }
}

#[test]
fn metrics_csv_round_trips() {
    let rows = vec![
        MetricRow {
            round: 3,
            partner_anon_id: "anon-0000abcd".into(),
            task_idx: "all".into(),
            metric_name: "loss".into(),
            value: 0.25,
        },
        MetricRow {
            round: 3,
            partner_anon_id: "anon-0000abcd".into(),
            task_idx: "2".into(),
            metric_name: "auroc".into(),
            value: 0.75,
        },
    ];
    let mut buf = Vec::new();
    write_metrics_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().next(), Some("round,partner_anon_id,task_idx,metric_name,value"));
    assert_eq!(text.lines().count(), 3);
    assert_eq!(read_metrics_csv(&buf[..]).unwrap(), rows);
}
