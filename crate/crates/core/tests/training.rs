use masseg_core::benchmark::{default_four_domain_suite, DomainDataset, DomainPair};
use masseg_core::gradcheck::finite_difference_check;
use masseg_core::importance::{compute_raw_importance, postprocess, Granularity, ImportanceMap};
use masseg_core::regularization::{build_freeze_mask, FreezeMask, StrategyConfig, StrategyKind};
use masseg_core::trainer::{
    evaluate_dice, run_sequence, train_domain, DomainState, LrDecay, SequenceOptions, SequenceSpec,
    TrainSchedule,
};
use masseg_core::{Error, ParameterStore, SegNet, SegNetConfig, Tensor};

fn suite() -> Vec<DomainPair> {
    default_four_domain_suite(1).unwrap()
}

fn short(epochs: usize) -> TrainSchedule {
    TrainSchedule {
        epochs_per_domain: epochs,
        first_domain_decay: LrDecay {
            factor: 0.5,
            every_epochs: epochs.div_ceil(3).max(1),
        },
        ..TrainSchedule::desk_scale()
    }
}

fn flat(store: &ParameterStore) -> Vec<f64> {
    store
        .entries()
        .iter()
        .flat_map(|e| e.tensor.data().iter().copied())
        .collect()
}

fn split(pairs: &[DomainPair]) -> (Vec<DomainDataset>, Vec<DomainDataset>) {
    (
        pairs.iter().map(|p| p.train.clone()).collect(),
        pairs.iter().map(|p| p.eval.clone()).collect(),
    )
}

#[test]
fn default_network_gradients_match_finite_differences() {
    let net = SegNet::build(SegNetConfig::default(), 3).unwrap();
    let mut params = net.params().clone();
    for (k, e) in params.entries_mut().iter_mut().enumerate() {
        if e.id.ends_with(".bias") {
            for (i, v) in e.tensor.data_mut().iter_mut().enumerate() {
                *v = 0.01 * (((k * 31 + i * 7) % 13) as f64 - 6.0);
            }
        }
    }
    let x = Tensor::new(
        vec![1, 1, 8, 8],
        (0..64).map(|i| ((i * 37) % 64) as f64 / 64.0).collect(),
    )
    .unwrap();
    let y: Vec<usize> = (0..64).map(|i| (i * 5 / 3) % 4).collect();
    let report = finite_difference_check(
        |g, v| {
            let input = g.constant(x.clone())?;
            let logits = net.forward(g, input, v, None)?;
            let probs = g.softmax_channel(logits)?;
            g.cross_entropy(probs, &y)
        },
        &params,
        1e-6,
    )
    .unwrap();
    assert_eq!(report.checked, 11708);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn fine_tuning_lowers_the_loss_and_raises_dice() {
    let s = suite();
    let mut net = SegNet::build(SegNetConfig::default(), 0).unwrap();
    let before = evaluate_dice(&net, &s[0].eval).unwrap();
    let out = train_domain(
        &mut net,
        &s[0].train,
        &StrategyConfig::new(StrategyKind::FineTune),
        &short(12),
        &DomainState::default(),
        0,
    )
    .unwrap();
    let means = out.log.epoch_means();
    assert_eq!(means.len(), 12);
    assert!(means[11] < 0.5 * means[0], "{means:?}");
    let after = evaluate_dice(&net, &s[0].eval).unwrap();
    assert!(after > before + 0.1, "{before} -> {after}");
    assert_eq!(out.log.records.len(), 12 * 12);
    assert_eq!(out.log.records[0].base_lr, 0.02);
    assert_eq!(out.log.records.last().unwrap().base_lr, 0.005);
}

#[test]
fn later_domains_hold_the_final_first_domain_rate() {
    let s = suite();
    let mut net = SegNet::build(SegNetConfig::default(), 0).unwrap();
    let schedule = short(6);
    let out = train_domain(
        &mut net,
        &s[1].train,
        &StrategyConfig::new(StrategyKind::FineTune),
        &schedule,
        &DomainState::default(),
        1,
    )
    .unwrap();
    assert!(out
        .log
        .records
        .iter()
        .all(|r| r.base_lr == schedule.base_lr(true, 5)));
    assert!(out.log.records.iter().all(|r| r.domain == 2));
}

#[test]
fn frozen_entries_never_move_and_the_rest_do() {
    let s = suite();
    let base = SegNet::build(SegNetConfig::default(), 2).unwrap();
    let raw = compute_raw_importance(&base, &[s[0].train.all_images().unwrap()]).unwrap();
    let omega = postprocess(&raw, Granularity::Kernel).unwrap();
    let mask = build_freeze_mask(&omega, None, 0.5, 0.0).unwrap();
    assert!(mask.frozen_fraction() > 0.4);
    let mut net = base.clone();
    train_domain(
        &mut net,
        &s[1].train,
        &StrategyConfig::new(StrategyKind::MasFix),
        &short(4),
        &DomainState {
            theta_star: None,
            omega: Some(omega),
            freeze: Some(mask.clone()),
        },
        1,
    )
    .unwrap();
    let frozen: Vec<bool> = mask
        .entries()
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .collect();
    let (a, b) = (flat(base.params()), flat(net.params()));
    let mut moved_free = 0;
    for k in 0..a.len() {
        if frozen[k] {
            assert_eq!(a[k].to_bits(), b[k].to_bits(), "frozen parameter {k} moved");
        } else if a[k] != b[k] {
            moved_free += 1;
        }
    }
    assert!(moved_free > 0);
}

#[test]
fn unit_importance_entries_keep_their_values_under_lr_scaling() {
    let s = suite();
    let base = SegNet::build(SegNetConfig::default(), 4).unwrap();
    let store = base.params();
    let values: Vec<Vec<f64>> = store
        .entries()
        .iter()
        .enumerate()
        .map(|(k, e)| vec![if k % 2 == 0 { 1.0 } else { 0.25 }; e.tensor.len()])
        .collect();
    let omega = ImportanceMap::from_values(store, values, Granularity::Filter, true, 1, 1).unwrap();
    let mut net = base.clone();
    train_domain(
        &mut net,
        &s[2].train,
        &StrategyConfig::new(StrategyKind::MasLr),
        &short(3),
        &DomainState {
            theta_star: None,
            omega: Some(omega),
            freeze: None,
        },
        2,
    )
    .unwrap();
    for (k, (a, b)) in store
        .entries()
        .iter()
        .zip(net.params().entries())
        .enumerate()
    {
        if k % 2 == 0 {
            assert_eq!(a.tensor, b.tensor, "{} moved", a.id);
        }
    }
    assert_ne!(store, net.params());
}

#[test]
fn mas_penalty_pulls_towards_the_anchor() {
    let s = suite();
    let mut base = SegNet::build(SegNetConfig::default(), 5).unwrap();
    let schedule = short(6);
    let ft = StrategyConfig::new(StrategyKind::FineTune);
    train_domain(
        &mut base,
        &s[0].train,
        &ft,
        &schedule,
        &DomainState::default(),
        0,
    )
    .unwrap();
    let omega = ImportanceMap::uniform(base.params(), 1.0, Granularity::Parameter, true).unwrap();
    let state = DomainState {
        theta_star: Some(base.params().clone()),
        omega: Some(omega),
        freeze: None,
    };

    let drift = |cfg: StrategyConfig| {
        let mut net = base.clone();
        train_domain(&mut net, &s[3].train, &cfg, &schedule, &state, 3).unwrap();
        flat(net.params())
            .iter()
            .zip(flat(base.params()))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
    };
    let free = drift(ft.clone());
    let mut mas = StrategyConfig::new(StrategyKind::Mas);
    mas.lambda = 1e5;
    let held = drift(mas);
    assert!(held < 0.5 * free, "penalized drift {held} vs free {free}");
}

#[test]
fn later_domains_require_strategy_state() {
    let s = suite();
    for kind in [StrategyKind::Mas, StrategyKind::MasLr, StrategyKind::MasFix] {
        let mut net = SegNet::build(SegNetConfig::default(), 0).unwrap();
        let err = train_domain(
            &mut net,
            &s[1].train,
            &StrategyConfig::new(kind),
            &short(1),
            &DomainState::default(),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingState(_)), "{kind}: {err}");
    }
}

#[test]
fn sequence_runs_are_deterministic_and_complete() {
    let (train, eval) = split(&suite());
    let spec = SequenceSpec {
        train: &train,
        eval: &eval,
        network: SegNetConfig::default(),
        strategy: StrategyConfig::new(StrategyKind::MasFix),
        schedule: short(2),
    };
    let a = run_sequence(&spec, SequenceOptions::default()).unwrap();
    let b = run_sequence(&spec, SequenceOptions::default()).unwrap();
    assert_eq!(a.rows.len(), 4);
    assert!(a
        .rows
        .iter()
        .all(|r| r.len() == 4 && r.iter().all(|v| (0.0..=1.0).contains(v))));
    let bits = |rows: &[Vec<f64>]| {
        rows.iter()
            .flatten()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a.rows), bits(&b.rows));
    assert_eq!(a.network, b.network);
    assert_eq!(a.importance_history.len(), 4);
    assert_eq!(a.importance_history[3].task_count(), 4);
    assert_eq!(a.freeze_history.len(), 4);
    for w in a.freeze_history.windows(2) {
        assert!(w[1].frozen_count() >= w[0].frozen_count());
    }
    assert!(a.checkpoints.is_empty());
    a.matrix().unwrap();

    let mut other = spec.schedule.clone();
    other.seed = 1;
    let c = run_sequence(
        &SequenceSpec {
            schedule: other,
            ..spec
        },
        SequenceOptions::default(),
    )
    .unwrap();
    assert_ne!(bits(&a.rows), bits(&c.rows));
}

#[test]
fn joint_retrains_on_the_union_from_scratch() {
    let (train, eval) = split(&suite());
    let spec = SequenceSpec {
        train: &train,
        eval: &eval,
        network: SegNetConfig::default(),
        strategy: StrategyConfig::new(StrategyKind::Joint),
        schedule: short(2),
    };
    let r = run_sequence(&spec, SequenceOptions::default()).unwrap();
    let steps: Vec<usize> = r.logs.iter().map(|l| l.records.len()).collect();
    assert_eq!(steps, vec![2 * 12, 2 * 14, 2 * 16, 2 * 18]);
    assert_eq!(r.logs[3].records[0].base_lr, 0.02);
}

#[test]
fn sequence_input_errors_keep_partial_results() {
    let (train, eval) = split(&suite());
    let spec = SequenceSpec {
        train: &train[..1],
        eval: &eval[..1],
        network: SegNetConfig::default(),
        strategy: StrategyConfig::new(StrategyKind::FineTune),
        schedule: short(1),
    };
    let failure = run_sequence(&spec, SequenceOptions::default()).unwrap_err();
    assert!(failure.partial.rows.is_empty());
    assert!(failure.to_string().contains("2 domains"), "{failure}");

    let mut bad = StrategyConfig::new(StrategyKind::Mas);
    bad.lambda = -1.0;
    let spec = SequenceSpec {
        train: &train,
        eval: &eval,
        strategy: bad,
        ..spec
    };
    let failure = run_sequence(&spec, SequenceOptions::default()).unwrap_err();
    assert!(failure.error.to_string().contains("strategy.lambda"));
}

#[test]
fn divergence_is_reported_with_its_position() {
    let s = suite();
    let base = SegNet::build(SegNetConfig::default(), 0).unwrap();
    let mut star = base.params().clone();
    for e in star.entries_mut() {
        e.tensor.data_mut().iter_mut().for_each(|v| *v += 1.0);
    }
    let omega = ImportanceMap::uniform(base.params(), 1.0, Granularity::Parameter, true).unwrap();
    let mut mas = StrategyConfig::new(StrategyKind::Mas);
    mas.lambda = 1e300;
    let mut net = base.clone();
    let err = train_domain(
        &mut net,
        &s[1].train,
        &mas,
        &short(3),
        &DomainState {
            theta_star: Some(star),
            omega: Some(omega),
            freeze: None,
        },
        1,
    )
    .unwrap_err();
    match err {
        Error::Divergence {
            domain,
            epoch,
            step,
            ..
        } => {
            assert_eq!(domain, 2);
            assert!(epoch >= 1 && step >= 1);
        }
        other => panic!("unexpected error {other}"),
    }
    assert_eq!(net, base);
}

#[test]
fn non_finite_inputs_are_rejected() {
    let (mut train, eval) = split(&suite());
    train[1].images[0].data_mut()[0] = f64::NAN;
    let spec = SequenceSpec {
        train: &train,
        eval: &eval,
        network: SegNetConfig::default(),
        strategy: StrategyConfig::new(StrategyKind::FineTune),
        schedule: short(1),
    };
    let failure = run_sequence(&spec, SequenceOptions::default()).unwrap_err();
    assert!(
        matches!(
            failure.error,
            Error::NonFinite { .. } | Error::Divergence { .. }
        ),
        "{failure}"
    );
    assert_eq!(failure.partial.rows.len(), 1);
    assert_eq!(failure.partial.logs.len(), 1);
}

#[test]
fn full_freeze_mask_blocks_every_update_over_a_sequence_step() {
    let s = suite();
    let net = SegNet::build(SegNetConfig::default(), 9).unwrap();
    let mut trained = net.clone();
    let omega = ImportanceMap::uniform(net.params(), 0.5, Granularity::Kernel, true).unwrap();
    train_domain(
        &mut trained,
        &s[1].train,
        &StrategyConfig::new(StrategyKind::MasFix),
        &short(2),
        &DomainState {
            theta_star: None,
            omega: Some(omega),
            freeze: Some(FreezeMask::full(net.params())),
        },
        1,
    )
    .unwrap();
    assert_eq!(trained, net);
}
