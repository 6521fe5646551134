use neurotext::classifier::{cross_entropy, l2_value, max_column_norm};
use neurotext::container::ContainerError;
use neurotext::dsp::{assemble_epochs, EpochTensor, PreprocessConfig};
use neurotext::encoder::LstmImpl;
use neurotext::ingest::{synth_generate, LabelMap, SynthSpec};
use neurotext::model::{Model, ModelConfig};
use neurotext::params::{Mode, ParamKind};
use neurotext::tensor::{Precision, Tape};
use neurotext::trainer::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const T: usize = 64;

fn epochs(n_classes: usize, per_class: usize, noise: f64, seed: u64) -> EpochTensor {
    let spec = SynthSpec {
        noise_sigma: noise,
        n_samples: T,
        ..SynthSpec::new(n_classes, per_class, seed)
    };
    let trials = synth_generate(&spec, &LabelMap::for_task(n_classes).unwrap()).unwrap();
    let cfg = PreprocessConfig {
        target_len: T,
        ..PreprocessConfig::default()
    };
    assemble_epochs(&trials, &cfg).unwrap()
}

fn small_model(n_classes: usize) -> ModelConfig {
    let mut cfg = ModelConfig::desk(n_classes);
    cfg.encoder.time_len = T;
    cfg
}

fn quick(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ..TrainConfig::desk(seed)
    }
}

fn scalar_cfg(lr: f64) -> TrainConfig {
    TrainConfig {
        lr,
        ..TrainConfig::default()
    }
}

#[test]
fn adam_zero_gradient_leaves_parameters_and_decays_moments() {
    let cfg = scalar_cfg(0.001);
    let mut theta = vec![0.7, -1.3];
    let (mut m, mut v) = (vec![0.5, -0.2], vec![0.04, 0.09]);
    adam_update(&mut theta, &[0.0, 0.0], &mut m, &mut v, 3, cfg.lr, &cfg);
    assert_eq!(m, vec![0.5 * 0.9, -0.2 * 0.9]);
    assert_eq!(v, vec![0.04 * 0.999, 0.09 * 0.999]);
    // A nonzero first moment still moves θ; with zero moments nothing moves.
    let mut theta0 = vec![0.7, -1.3];
    let (mut m0, mut v0) = (vec![0.0; 2], vec![0.0; 2]);
    adam_update(&mut theta0, &[0.0, 0.0], &mut m0, &mut v0, 1, cfg.lr, &cfg);
    assert_eq!(theta0, vec![0.7, -1.3]);
    assert!(theta[0] < 0.7 && theta[1] > -1.3);
}

#[test]
fn adam_first_step_is_lr_over_one_plus_eps() {
    let cfg = scalar_cfg(0.001);
    let mut theta = vec![0.0];
    let (mut m, mut v) = (vec![0.0], vec![0.0]);
    adam_update(&mut theta, &[1.0], &mut m, &mut v, 1, cfg.lr, &cfg);
    let expected = -0.001 / (1.0 + 1e-7);
    assert!((theta[0] - expected).abs() < 1e-15, "{}", theta[0]);
}

#[test]
fn adam_minimizes_a_parabola() {
    // With lr = 0.001 Adam moves about lr per step, so 500 steps cannot
    // cross a distance of 1; a step size of 0.01 can.
    let cfg = scalar_cfg(0.01);
    let mut theta = vec![1.0];
    let (mut m, mut v) = (vec![0.0], vec![0.0]);
    let mut reached = None;
    for t in 1..=500 {
        let g = [2.0 * theta[0]];
        adam_update(&mut theta, &g, &mut m, &mut v, t, cfg.lr, &cfg);
        if theta[0].abs() < 1e-3 && reached.is_none() {
            reached = Some(t);
        }
    }
    assert!(reached.is_some(), "final θ = {}", theta[0]);
    assert!(theta[0].abs() < 1e-3, "final θ = {}", theta[0]);
}

#[test]
fn lr_decays_once_per_epoch() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(0), 0.001);
    assert!((cfg.lr_at(1) - 0.00095).abs() < 1e-18);
    assert!((cfg.lr_at(10) - 0.001 * 0.95f64.powi(10)).abs() < 1e-18);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            beta1: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            beta2: -0.1,
            ..TrainConfig::default()
        },
        TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))), "{bad:?}");
    }
}

#[test]
fn early_stopping_waits_patience_epochs_after_the_plateau() {
    let mut s = EarlyStopping::new(15);
    let mut stopped_at = None;
    for epoch in 0..100 {
        let loss = if epoch <= 5 { 1.0 - 0.1 * epoch as f64 } else { 0.5 };
        s.observe(epoch, loss);
        if s.should_stop() {
            stopped_at = Some(epoch);
            break;
        }
    }
    assert_eq!(s.best_epoch, Some(5));
    assert_eq!(stopped_at, Some(20));
}

#[test]
fn fit_is_deterministic_and_keeps_the_best_epoch() {
    let data = epochs(2, 10, 1.0, 3);
    let (train, val) = split_epochs(&data, 0.2, 3).unwrap();
    let cfg = quick(11, 4);
    let a = fit(&small_model(2), &cfg, &train, &val).unwrap();
    let b = fit(&small_model(2), &cfg, &train, &val).unwrap();
    assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());

    let rows = &a.metrics.rows;
    assert_eq!(rows.len(), 4);
    assert!(rows.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
    assert!(rows
        .iter()
        .all(|r| (0.0..=1.0).contains(&r.train_acc) && (0.0..=1.0).contains(&r.val_acc)));
    for r in rows {
        assert!(a.checkpoint.best_val_loss <= r.val_loss);
        assert_eq!(r.lr, cfg.lr_at(r.epoch));
    }
    assert_eq!(a.metrics.best().unwrap().epoch, a.checkpoint.epoch);

    // The logged validation loss is CE + L2 of the retained parameters.
    let model = &a.checkpoint.model;
    let probs = model.predict_probs(&val, 8).unwrap();
    let offline =
        cross_entropy(&probs, &val.labels).unwrap() + l2_value(&model.params, model.config.classifier.l2_lambda);
    assert!((offline - a.checkpoint.best_val_loss).abs() <= 1e-6);

    let c = fit(&small_model(2), &quick(12, 4), &train, &val).unwrap();
    assert_ne!(a.metrics.to_csv(), c.metrics.to_csv());
}

#[test]
fn dense_columns_respect_max_norm_after_training() {
    let data = epochs(2, 10, 1.0, 4);
    let (train, val) = split_epochs(&data, 0.2, 4).unwrap();
    let mut model = small_model(2);
    model.classifier.maxnorm_c = 0.5;
    let out = fit(&model, &quick(5, 3), &train, &val).unwrap();
    for p in out
        .checkpoint
        .model
        .params
        .iter()
        .filter(|p| p.kind == ParamKind::DenseKernel)
    {
        assert!(max_column_norm(&p.value) <= 0.5 + 1e-9, "{}", p.name);
    }
}

#[test]
fn logged_train_loss_matches_an_offline_recomputation() {
    // One epoch, one batch holding every trial and no dropout: the logged
    // loss is CE + L2 of the initial parameters on that batch.
    let data = epochs(2, 6, 1.0, 5);
    let (train, val) = split_epochs(&data, 0.2, 5).unwrap();
    let mut mc = small_model(2);
    mc.encoder.dropout_p = 0.0;
    mc.classifier.dropout_p = 0.0;
    let cfg = TrainConfig {
        batch_size: train.n_trials(),
        ..quick(8, 1)
    };
    let out = fit(&mc, &cfg, &train, &val).unwrap();

    let model = Model::init(mc.clone(), cfg.seed, cfg.precision).unwrap();
    let mut tape = Tape::new();
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let fwd = model
        .forward(
            &mut tape,
            &train.to_tensor(cfg.precision),
            Mode::Train,
            LstmImpl::Fused,
            &mut rng,
        )
        .unwrap();
    let probs: Vec<Vec<f64>> = tape.data(fwd.probs).chunks(2).map(<[f64]>::to_vec).collect();
    let offline = cross_entropy(&probs, &train.labels).unwrap() + l2_value(&model.params, mc.classifier.l2_lambda);
    assert!(
        (offline - out.metrics.rows[0].train_loss).abs() <= 1e-6,
        "{offline} vs {}",
        out.metrics.rows[0].train_loss
    );
}

#[test]
fn fit_reaches_high_train_accuracy_on_separable_data() {
    let data = epochs(2, 50, 1.0, 6);
    let (train, val) = split_epochs(&data, 0.2, 6).unwrap();
    let out = fit(&small_model(2), &quick(6, 30), &train, &val).unwrap();
    let best = out.metrics.rows.iter().map(|r| r.train_acc).fold(0.0, f64::max);
    assert!(best >= 0.95, "{}", out.metrics.to_csv());
}

#[test]
fn fit_reports_non_finite_loss_with_its_position() {
    let mut data = epochs(2, 4, 1.0, 7);
    let (train, val) = split_epochs(&data, 0.25, 7).unwrap();
    let mut bad = train.clone();
    bad.data.iter_mut().for_each(|v| *v *= 1e300);
    match fit(&small_model(2), &quick(1, 2), &bad, &val) {
        Err(TrainError::NonFinite { epoch: 0, batch: 0 }) => {}
        other => panic!("{other:?}"),
    }
    data.labels[0] = 5;
    assert!(matches!(
        fit(&small_model(2), &quick(1, 1), &data, &val),
        Err(TrainError::LabelMismatch { label: 5, n_classes: 2 })
    ));
    let empty = train.select(&[]);
    assert!(matches!(
        fit(&small_model(2), &quick(1, 1), &empty, &val),
        Err(TrainError::EmptySplit(_))
    ));
}

#[test]
fn evaluation_of_perfect_predictions() {
    let labels = vec![0, 1, 2, 2, 1, 0];
    let probs: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| (0..3).map(|c| if c == l { 0.8 } else { 0.1 }).collect())
        .collect();
    let e = evaluate_probs(&probs, &labels, 3).unwrap();
    assert_eq!(e.accuracy, 1.0);
    assert_eq!(e.confusion, vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]);
    assert_eq!(e.per_class, vec![Some(1.0); 3]);
    assert!((e.mean_loss + 0.8f64.ln()).abs() < 1e-12);
    assert!(matches!(
        evaluate_probs(&probs, &[0, 1, 3, 2, 1, 0], 3),
        Err(TrainError::LabelMismatch { .. })
    ));
}

#[test]
fn random_predictions_score_near_chance() {
    for n_classes in [2, 3, 5, 10] {
        let n = 1000 * n_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(n_classes as u64);
        let labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..n_classes).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let e = evaluate_probs(&probs, &labels, n_classes).unwrap();
        let p = 1.0 / n_classes as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((e.accuracy - p).abs() <= 3.0 * sigma, "{n_classes}: {}", e.accuracy);
    }
}

proptest! {
    #[test]
    fn confusion_rows_count_each_class(
        rows in prop::collection::vec((0usize..4, prop::collection::vec(0.01f64..1.0, 4)), 1..60)
    ) {
        let labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let probs: Vec<Vec<f64>> = rows.iter().map(|r| r.1.clone()).collect();
        let e = evaluate_probs(&probs, &labels, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&e.accuracy));
        for c in 0..4 {
            let count = labels.iter().filter(|&&l| l == c).count();
            prop_assert_eq!(e.confusion[c].iter().sum::<usize>(), count);
        }
    }

    #[test]
    fn first_adam_step_moves_at_most_lr(g in -1e3f64..1e3, theta0 in -10.0f64..10.0) {
        let cfg = scalar_cfg(0.001);
        let mut theta = vec![theta0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_update(&mut theta, &[g], &mut m, &mut v, 1, cfg.lr, &cfg);
        prop_assert!((theta[0] - theta0).abs() <= cfg.lr * (1.0 + 1e-12));
        prop_assert!(g == 0.0 || (theta[0] - theta0).signum() == -g.signum());
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let model = Model::init(small_model(3), 21, Precision::Single).unwrap();
    let mut adam = AdamState::new(&model.params);
    adam.step = 7;
    adam.m[0][0] = 0.125;
    adam.v[0][0] = 1e-9;
    let ck = Checkpoint {
        model,
        train: TrainConfig::desk(21),
        adam,
        epoch: 4,
        best_val_loss: 0.625,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    for (a, b) in ck.model.params.iter().zip(back.model.params.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &[f64]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.value.data()), bits(b.value.data()));
    }

    let data = epochs(3, 3, 1.0, 9);
    let before = ck.model.predict_probs(&data, 4).unwrap();
    let after = back.model.predict_probs(&data, 4).unwrap();
    assert_eq!(before, after);
}

#[test]
fn corrupted_checkpoint_fails_the_checksum() {
    let model = Model::init(small_model(2), 1, Precision::Single).unwrap();
    let ck = Checkpoint {
        adam: AdamState::new(&model.params),
        model,
        train: TrainConfig::default(),
        epoch: 0,
        best_val_loss: 1.0,
    };
    let mut bytes = ck.to_bytes();
    let last = bytes.len() - 20;
    bytes[last] ^= 0x01;
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(TrainError::Container(ContainerError::Checksum { .. }))
    ));
    let bytes = ck.to_bytes();
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() / 2]),
        Err(TrainError::Container(_))
    ));
    let mut wrong = bytes.clone();
    wrong[7] = b'9';
    assert!(matches!(
        Checkpoint::from_bytes(&wrong),
        Err(TrainError::Container(ContainerError::Version { .. }))
    ));
    assert!(matches!(
        load_checkpoint(std::path::Path::new("/nonexistent/x.ckpt")),
        Err(TrainError::Io { .. })
    ));
}

#[test]
fn sweep_rows_nest_and_match_plain_fits() {
    let data = epochs(2, 14, 1.0, 10);
    let (pool, val) = split_epochs(&data, 0.2, 10).unwrap();
    let cfg = quick(10, 2);
    let full_k = pool.labels.iter().filter(|&&l| l == 0).count();
    let rows = sweep_data_efficiency(&pool, &val, &[2, full_k], &small_model(2), &cfg).unwrap();
    assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![2, full_k]);
    assert_eq!(rows[0].n_train, 4);

    let plain = fit(&small_model(2), &cfg, &pool, &val).unwrap();
    let eval = evaluate(&plain.checkpoint.model, &val, cfg.batch_size).unwrap();
    assert_eq!(rows[1].accuracy, eval.accuracy);
    assert_eq!(rows[1].val_loss, plain.checkpoint.best_val_loss);

    assert!(matches!(
        sweep_data_efficiency(&pool, &val, &[2, full_k + 1], &small_model(2), &cfg),
        Err(TrainError::Ingest(_))
    ));
}

#[test]
fn metrics_csv_round_trips() {
    let log = MetricsLog {
        rows: vec![MetricsRow {
            epoch: 0,
            train_loss: 0.1 + 0.2,
            train_acc: 0.5,
            val_loss: 1.0 / 3.0,
            val_acc: 0.25,
            lr: 0.001,
        }],
    };
    let csv = log.to_csv();
    assert!(csv.starts_with("epoch,train_loss,train_acc,val_loss,val_acc,lr\n"));
    assert_eq!(MetricsLog::from_csv(&csv).unwrap(), log);
}

#[test]
fn a_trailing_batch_of_one_is_kept() {
    let data = epochs(3, 4, 1.0, 13);
    let (train, val) = split_epochs(&data, 0.25, 13).unwrap();
    assert_eq!(train.n_trials(), 9);
    let cfg = quick(2, 1);
    assert_eq!(train.n_trials() % cfg.batch_size, 1);
    let out = fit(&small_model(3), &cfg, &train, &val).unwrap();
    assert_eq!(out.metrics.rows.len(), 1);
}
