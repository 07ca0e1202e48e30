use super::*;
use crate::rncl::LossKind;
use crate::synth::{generate, GeneratorSpec};
use alloc::collections::BTreeSet;

fn tiny() -> Dataset {
    generate(&GeneratorSpec {
        num_scenes: 20,
        texts_per_scene: 2,
        p_n: 6,
        t_n: 5,
        d_f: 8,
        num_prototypes: 10,
        ..GeneratorSpec::default()
    })
    .unwrap()
}

fn config(kind: LossKind) -> TrainConfig {
    TrainConfig {
        loss: LossConfig {
            kind,
            ..LossConfig::default()
        },
        batch_size: 8,
        epochs: 5,
        d_c: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn batches_are_deterministic_per_seed_and_epoch() {
    let ds = tiny();
    let a = make_batches(&ds, 8, 3, 1).unwrap();
    assert_eq!(a, make_batches(&ds, 8, 3, 1).unwrap());
    assert_ne!(a, make_batches(&ds, 8, 3, 2).unwrap());
    assert_ne!(a, make_batches(&ds, 8, 4, 1).unwrap());
}

#[test]
fn batches_partition_the_pairs_and_drop_the_tail() {
    let ds = tiny();
    let batches = make_batches(&ds, 7, 0, 1).unwrap();
    assert_eq!(batches.len(), 40 / 7);
    let assigned: BTreeSet<(usize, usize)> = ds.assigned_pairs().unwrap().into_iter().collect();
    let mut seen = BTreeSet::new();
    for b in &batches {
        assert_eq!(b.labels, CorrespondenceLabels::identity(7));
        for (&t, &s) in b.texts.iter().zip(&b.scenes) {
            assert!(assigned.contains(&(t, s)));
            assert!(seen.insert(t));
        }
    }
    assert_eq!(seen.len(), 35);
}

#[test]
fn batches_follow_the_noisy_assignment() {
    let ds = crate::synth::inject_noise(&tiny(), 0.5, 1).unwrap();
    let assigned: BTreeSet<(usize, usize)> = ds.assigned_pairs().unwrap().into_iter().collect();
    for b in make_batches(&ds, 4, 0, 1).unwrap() {
        for (&t, &s) in b.texts.iter().zip(&b.scenes) {
            assert!(assigned.contains(&(t, s)));
        }
    }
}

#[test]
fn too_few_pairs_is_a_config_error() {
    let ds = tiny();
    assert!(matches!(make_batches(&ds, 41, 0, 1), Err(Error::Config(_))));
    assert!(matches!(make_batches(&ds, 1, 0, 1), Err(Error::Config(_))));
    assert_eq!(make_batches(&ds, 40, 0, 1).unwrap().len(), 1);
}

#[test]
fn invalid_configs_are_rejected() {
    let base = config(LossKind::Rnc);
    let bad = [
        TrainConfig { batch_size: 1, ..base },
        TrainConfig { epochs: 0, ..base },
        TrainConfig { learning_rate: -1e-3, ..base },
        TrainConfig { learning_rate: f64::INFINITY, ..base },
        TrainConfig { d_c: 7, ..base },
        TrainConfig { d_c: 0, ..base },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let ds = tiny();
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            optimizer,
            ..config(LossKind::Contrastive)
        };
        let mut trainer = Trainer::new(8, cfg).unwrap();
        let before = trainer.params.clone();
        let batch = &make_batches(&ds, 8, 0, 1).unwrap()[0];
        let loss = trainer.train_step(&ds, batch).unwrap();
        assert!(loss > 0.0);
        assert_eq!(trainer.params, before);
    }
}

#[test]
fn all_positive_batch_under_rnc_is_inert() {
    let ds = tiny();
    let mut trainer = Trainer::new(8, config(LossKind::Rnc)).unwrap();
    let before = trainer.params.clone();
    let mut batch = make_batches(&ds, 8, 0, 1).unwrap().remove(0);
    batch.labels = CorrespondenceLabels::all_positive(8);
    let (loss, grads) = trainer.loss_and_gradients(&ds, &batch).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.iter().all(|g| g.values().iter().all(|&v| v == 0.0)));
    assert_eq!(trainer.train_step(&ds, &batch).unwrap(), 0.0);
    assert_eq!(trainer.params, before);
}

#[test]
fn zero_gradient_adam_step_is_a_no_op() {
    let cfg = config(LossKind::Rnc);
    let mut a = DenseArray::from_raw(1, 3, alloc::vec![1.0, -2.0, 0.5]);
    let before = a.clone();
    let zero = DenseArray::zeros(1, 3);
    let mut opt = Optimizer::new(&cfg, [[1, 3]]);
    for _ in 0..3 {
        opt.step(alloc::vec![&mut a], &[&zero]);
    }
    assert_eq!(a, before);
}

#[test]
fn first_adam_step_moves_each_coordinate_by_the_learning_rate() {
    let cfg = TrainConfig {
        learning_rate: 0.01,
        adam_epsilon: 0.0,
        ..config(LossKind::Rnc)
    };
    let mut a = DenseArray::zeros(1, 3);
    let g = DenseArray::from_raw(1, 3, alloc::vec![3.0, -0.2, 1e-4]);
    let mut opt = Optimizer::new(&cfg, [[1, 3]]);
    opt.step(alloc::vec![&mut a], &[&g]);
    for (x, d) in a.values().iter().zip(g.values()) {
        assert!(libm::fabs(x + 0.01 * d.signum()) < 1e-12, "{x}");
    }
}

#[test]
fn sgd_step_subtracts_the_scaled_gradient() {
    let cfg = TrainConfig {
        learning_rate: 0.5,
        optimizer: OptimizerKind::Sgd,
        ..config(LossKind::Rnc)
    };
    let mut a = DenseArray::from_raw(1, 2, alloc::vec![1.0, 1.0]);
    let g = DenseArray::from_raw(1, 2, alloc::vec![2.0, -4.0]);
    Optimizer::new(&cfg, [[1, 2]]).step(alloc::vec![&mut a], &[&g]);
    assert_eq!(a.values(), &[0.0, 3.0]);
}

#[test]
fn loss_decreases_over_five_epochs_on_a_clean_tiny_set() {
    let ds = tiny();
    for kind in [LossKind::Contrastive, LossKind::Complementary, LossKind::Rnc] {
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            ..config(kind)
        };
        let mut trainer = Trainer::new(8, cfg).unwrap();
        let first = trainer.run_epoch(&ds).unwrap();
        let mut last = first;
        for _ in 1..5 {
            last = trainer.run_epoch(&ds).unwrap();
        }
        assert!(last < first, "{kind:?}: {first} -> {last}");
        assert_eq!(trainer.epoch(), 5);
    }
}

#[test]
fn training_is_deterministic_apart_from_wall_time() {
    let ds = tiny();
    let cfg = TrainConfig {
        epochs: 2,
        ..config(LossKind::Rnc)
    };
    let mut t = 0.0;
    let mut clock = || {
        t += 1.0;
        t
    };
    let (p1, mut l1) = train(&ds, &ds, &cfg, &mut clock).unwrap();
    let (p2, mut l2) = train(&ds, &ds, &cfg, &mut clock).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(l1.epochs.len(), 2);
    for l in [&mut l1, &mut l2] {
        for e in &mut l.epochs {
            assert!(e.mean_loss.is_finite());
            e.wall_time_s = 0.0;
        }
    }
    assert_eq!(l1, l2);
    assert_eq!(l1.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), [1, 2]);
}

#[test]
fn mismatched_d_c_is_rejected() {
    let params = DapParams::zeros(8, 4);
    assert!(matches!(
        Trainer::with_params(params, config(LossKind::Rnc)),
        Err(Error::Config(_))
    ));
}

#[test]
fn divergence_reports_epoch_and_step() {
    let ds = tiny();
    let cfg = TrainConfig {
        learning_rate: 1e308,
        optimizer: OptimizerKind::Sgd,
        ..config(LossKind::Contrastive)
    };
    let mut trainer = Trainer::new(8, cfg).unwrap();
    let batch = &make_batches(&ds, 8, 0, 1).unwrap()[0];
    match trainer.train_step(&ds, batch) {
        Err(Error::Divergence { epoch: 0, step: 1, what }) => assert_eq!(what, "parameters"),
        other => panic!("{other:?}"),
    }
}
