mod common;

use common::*;
use gmpool::graph_data::generate_synthetic;
use gmpool::model::{Model, ModelConfig, Pooling};
use gmpool::training::{evaluate, fit, loss_on_tape, train, train_step, Adam, Loss, Metric};
use gmpool::{Dataset, Error, SyntheticSpec, Tape, Task, Tensor, TrainConfig};

fn tiny(pooling: Pooling) -> ModelConfig {
    ModelConfig {
        hidden: 8,
        steps_pre: 2,
        steps_post: 1,
        dropout: 0.0,
        pooling,
        ..ModelConfig::default()
    }
}

fn data(count: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        count,
        groups: (1, 3),
        group_size: (2, 3),
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

#[test]
fn zero_epochs_returns_initial_model() {
    let ds = data(12, 0);
    let mut model = Model::new(ds.d_n, ds.d_e, ds.task, tiny(Pooling::Gmpool), 4).unwrap();
    let before = model.clone();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let res = fit(&mut model, &ds, None, &cfg, 0, &mut rng(1)).unwrap();
    assert!(res.trace.is_empty());
    assert_eq!(res.best_epoch, 0);
    assert_eq!(res.model, before);
}

#[test]
fn constant_labels_are_learned() {
    let mut ds = data(20, 1);
    for g in &mut ds.graphs {
        g.label = Some(2.5);
    }
    for pooling in [Pooling::Gmpool, Pooling::Ngmpool, Pooling::None] {
        let mut model = Model::new(ds.d_n, ds.d_e, ds.task, tiny(pooling), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 100,
            lr: 1e-2,
            batch_size: 10,
            model: tiny(pooling),
            ..TrainConfig::default()
        };
        let res = fit(&mut model, &ds, None, &cfg, 0, &mut rng(3)).unwrap();
        let final_loss = evaluate(&res.model, &ds, Loss::Mse).unwrap().loss;
        assert!(final_loss < 1e-2, "{pooling:?}: {final_loss}");
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let ds = data(6, 2);
    let mut model = Model::new(ds.d_n, ds.d_e, ds.task, tiny(Pooling::Gmpool), 5).unwrap();
    let before = model.clone();
    let mut adam = Adam::for_model(&model);
    let batch: Vec<_> = ds.graphs.iter().collect();
    train_step(&mut model, &mut adam, &batch, Loss::Mse, 0.0, &mut rng(0)).unwrap();
    assert_eq!(model, before);
}

#[test]
fn batch_loss_ignores_example_order() {
    let ds = data(8, 3);
    let model = Model::new(ds.d_n, ds.d_e, ds.task, tiny(Pooling::Gmpool), 6).unwrap();
    let loss_for = |order: &[usize], loss: Loss| {
        let mut tape = Tape::new();
        let vars = model.params.register(&mut tape, false).unwrap();
        let outs: Vec<_> = order
            .iter()
            .map(|&i| {
                model
                    .forward(&mut tape, &vars, &ds.graphs[i], false, &mut rng(0))
                    .unwrap()
                    .output
            })
            .collect();
        let target: Vec<f64> = order
            .iter()
            .map(|&i| ds.graphs[i].label.unwrap() / 3.0)
            .collect();
        let l = loss_on_tape(&mut tape, loss, &outs, &target).unwrap();
        tape.value(l).data()[0]
    };
    let id: Vec<usize> = (0..8).collect();
    let perm = random_permutation(8, &mut rng(9));
    for loss in [Loss::Mse, Loss::Bce] {
        let (a, b) = (loss_for(&id, loss), loss_for(&perm, loss));
        assert!((a - b).abs() <= 1e-12 * a.abs(), "{a} vs {b}");
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let z = random_tensor(&[1, 5], -2.0, 2.0, &mut rng(10));
    let target = [0.0, 1.0, 1.0, 0.0, 1.0];
    for loss in [Loss::Mse, Loss::Bce] {
        let err = gradient_check(&z, 1e-6, |t, x| {
            let parts: Vec<_> = (0..5)
                .map(|k| {
                    let sel = t
                        .constant(
                            Tensor::new([5, 1], (0..5).map(|i| f64::from(i == k)).collect())
                                .unwrap(),
                        )
                        .unwrap();
                    t.matmul(x, sel).unwrap()
                })
                .collect();
            loss_on_tape(t, loss, &parts, &target).unwrap()
        });
        assert!(err < 1e-6, "{loss:?}: {err}");
    }
}

#[test]
fn five_fold_protocol_covers_every_graph_once() {
    let ds = data(30, 4);
    let cfg = TrainConfig {
        epochs: 2,
        lr: 1e-3,
        batch_size: 8,
        model: tiny(Pooling::Gmpool),
        ..TrainConfig::default()
    };
    let out = train(&ds, &cfg).unwrap();
    assert_eq!(out.folds.len(), 5);
    assert_eq!(out.metric, Metric::Rmse);
    assert_eq!(out.trace().len(), 10);
    assert!(out.mean_test_metric().unwrap().is_finite());
    let idx = gmpool::graph_data::kfold_indices(30, 5, 0.1, 0).unwrap();
    assert_eq!(idx.test, out.test_indices);
    let mut seen = [0; 30];
    for f in &idx.folds {
        for &i in &f.valid {
            seen[i] += 1;
        }
    }
    for &i in &idx.test {
        assert_eq!(seen[i], 0);
        seen[i] = 1;
    }
    assert!(seen.iter().all(|&c| c == 1));
}

#[test]
fn parallel_folds_match_sequential() {
    let ds = data(18, 5);
    let base = TrainConfig {
        epochs: 2,
        lr: 1e-3,
        batch_size: 4,
        folds: 3,
        model: tiny(Pooling::Ngmpool),
        ..TrainConfig::default()
    };
    let seq = train(&ds, &base).unwrap();
    let par = train(
        &ds,
        &TrainConfig {
            parallel_folds: 3,
            ..base
        },
    )
    .unwrap();
    assert_eq!(seq, par);
}

#[test]
fn classification_uses_bce_and_auc() {
    let mut ds = data(24, 6);
    for g in &mut ds.graphs {
        g.label = Some(f64::from(g.label.unwrap() >= 2.0));
    }
    ds.task = Task::Classification;
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 6,
        folds: 2,
        test_fraction: 0.25,
        model: tiny(Pooling::None),
        ..TrainConfig::default()
    };
    let out = train(&ds, &cfg).unwrap();
    assert_eq!(out.metric, Metric::RocAuc);
    let m = &out.folds[0].model;
    assert!(ds
        .graphs
        .iter()
        .all(|g| (0.0..=1.0).contains(&m.predict(g).unwrap())));

    let reg = data(24, 6);
    let bad = TrainConfig {
        loss: Some(Loss::Bce),
        ..cfg
    };
    assert!(matches!(train(&reg, &bad), Err(Error::InvalidArgument(_))));
}

#[test]
fn divergence_is_reported_with_location() {
    let mut ds = data(10, 7);
    ds.graphs[3].label = Some(1e300);
    let mut model = Model::new(ds.d_n, ds.d_e, ds.task, tiny(Pooling::None), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 10,
        ..TrainConfig::default()
    };
    match fit(&mut model, &ds, None, &cfg, 2, &mut rng(0)) {
        Err(Error::Divergence { fold: 2, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let ds = data(5, 8);
    let model = Model::new(ds.d_n, ds.d_e, ds.task, tiny(Pooling::Gmpool), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back, model);
    for g in &ds.graphs {
        assert_eq!(back.predict(g).unwrap(), model.predict(g).unwrap());
    }
}
