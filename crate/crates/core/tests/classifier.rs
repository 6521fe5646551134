mod common;

use common::{random, rng};
use neurotext::classifier::*;
use neurotext::ingest::LabelMap;
use neurotext::model::{Model, ModelConfig};
use neurotext::params::{ModelParams, ParamKind};
use neurotext::tensor::{Precision, Tape, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        z in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let q = softmax(&shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn tape_softmax_matches_the_scalar_version(seed in any::<u64>(), c in 2usize..8) {
        let z = random(&mut rng(seed), &[3, c], 5.0);
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let p = tape.softmax(zv).unwrap();
        for (row, prow) in z.data().chunks(c).zip(tape.data(p).chunks(c)) {
            for (a, b) in softmax(row).iter().zip(prow) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn max_norm_projection_bounds_and_is_idempotent(
        seed in any::<u64>(), rows in 1usize..10, cols in 1usize..6, scale in 0.1f64..10.0, c in 0.1f64..4.0,
    ) {
        let w = random(&mut rng(seed), &[rows, cols], scale);
        let once = maxnorm_project(&w, c);
        prop_assert!(max_column_norm(&once) <= c + 1e-9);
        let twice = maxnorm_project(&once, c);
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        // Columns already inside the ball are untouched.
        for j in 0..cols {
            let norm = (0..rows).map(|i| w.data()[i * cols + j].powi(2)).sum::<f64>().sqrt();
            if norm <= c {
                for i in 0..rows {
                    prop_assert_eq!(once.data()[i * cols + j], w.data()[i * cols + j]);
                }
            }
        }
    }

    #[test]
    fn single_precision_projection_still_bounds(seed in any::<u64>(), c in 0.1f64..4.0) {
        let w = random(&mut rng(seed), &[16, 4], 3.0).cast(Precision::Single);
        prop_assert!(max_column_norm(&maxnorm_project(&w, c)) <= c);
    }
}

#[test]
fn uniform_predictor_cross_entropy_is_log_classes() {
    for n in [2usize, 3, 5, 10, 20] {
        let probs = vec![vec![1.0 / n as f64; n]; 4];
        let labels: Vec<usize> = (0..4).map(|i| i % n).collect();
        let ce = cross_entropy(&probs, &labels).unwrap();
        assert!((ce - (n as f64).ln()).abs() <= 1e-9, "{n}: {ce}");

        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[4, n], Precision::Double));
        let p = tape.softmax(z).unwrap();
        let l = tape.cross_entropy(p, &labels).unwrap();
        assert!((tape.data(l)[0] - (n as f64).ln()).abs() <= 1e-9);
    }
}

#[test]
fn cross_entropy_clamps_zero_probabilities() {
    let ce = cross_entropy(&[vec![1.0, 0.0]], &[1]).unwrap();
    assert!((ce - 1e-12f64.ln().abs()).abs() < 1e-9);
    assert!(cross_entropy(&[vec![0.5, 0.5]], &[2]).is_err());
    assert!(cross_entropy(&[], &[]).is_err());
}

#[test]
fn elu_values() {
    assert_eq!(elu(0.0, 1.0), 0.0);
    assert_eq!(elu(2.5, 1.0), 2.5);
    assert!((elu(-1.0, 1.0) - (f64::exp(-1.0) - 1.0)).abs() < 1e-15);
    assert!((elu(-50.0, 1.0) + 1.0).abs() < 1e-15);
    assert!((elu(-1.0, 0.5) - 0.5 * (f64::exp(-1.0) - 1.0)).abs() < 1e-15);
}

#[test]
fn dense_forward_matches_a_loop() {
    let mut r = rng(3);
    let (h, w, b) = (
        random(&mut r, &[3, 4], 1.0),
        random(&mut r, &[4, 2], 1.0),
        random(&mut r, &[2], 1.0),
    );
    let mut tape = Tape::new();
    let (hv, wv, bv) = (
        tape.constant(h.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let y = dense_forward(&mut tape, hv, wv, bv, Activation::Elu(1.0)).unwrap();
    for n in 0..3 {
        for o in 0..2 {
            let z = b.data()[o] + (0..4).map(|i| h.data()[n * 4 + i] * w.data()[i * 2 + o]).sum::<f64>();
            assert!((tape.data(y)[n * 2 + o] - elu(z, 1.0)).abs() <= 1e-12);
        }
    }
}

#[test]
fn l2_covers_conv_and_dense_kernels_only() {
    let mut params = ModelParams::new();
    params.insert(
        "conv",
        ParamKind::ConvKernel,
        Tensor::full(&[2], 1.0, Precision::Double),
    );
    params.insert(
        "dense",
        ParamKind::DenseKernel,
        Tensor::full(&[3], 2.0, Precision::Double),
    );
    params.insert(
        "lstm",
        ParamKind::RecurrentKernel,
        Tensor::full(&[4], 5.0, Precision::Double),
    );
    params.insert("bias", ParamKind::Bias, Tensor::full(&[4], 5.0, Precision::Double));
    assert!((l2_value(&params, 0.001) - 0.001 * 14.0).abs() < 1e-15);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let pen = l2_penalty(&mut tape, &params, &bound, 0.001).unwrap().unwrap();
    assert!((tape.data(pen)[0] - 0.014).abs() < 1e-15);
    assert!(l2_penalty(&mut tape, &params, &bound, 0.0).unwrap().is_none());
}

#[test]
fn predictions_take_the_lowest_index_on_ties() {
    let labels = LabelMap::for_task(5).unwrap();
    let p = ClassPrediction::from_probs(vec![0.1, 0.35, 0.35, 0.1, 0.1], Some(&labels));
    assert_eq!(p.label, 1);
    assert_eq!(p.class_name.as_deref(), labels.class_name(1));
    assert_eq!(ClassPrediction::from_probs(vec![0.5, 0.5], None).class_name, None);
}

#[test]
fn head_layout_and_classify() {
    let cfg = ClassifierConfig::default();
    let layers = cfg.layers(560);
    let names: Vec<_> = layers.iter().map(|l| (l.0.as_str(), l.1, l.2)).collect();
    assert_eq!(
        names,
        vec![
            ("classifier.dense0", 560, 128),
            ("classifier.dense1", 128, 64),
            ("classifier.output", 64, 2)
        ]
    );
    let model = Model::init(ModelConfig::full(2), 1, Precision::Double).unwrap();
    let emb = random(&mut rng(4), &[3, 560], 1.0);
    let preds = classify(
        &model.config.classifier,
        &model.params,
        &emb,
        Some(&LabelMap::for_task(2).unwrap()),
    )
    .unwrap();
    assert_eq!(preds.len(), 3);
    for p in &preds {
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.class_name.is_some());
    }
    assert!(ClassifierConfig {
        n_classes: 1,
        ..cfg.clone()
    }
    .validate()
    .is_err());
    assert!(ClassifierConfig { maxnorm_c: 0.0, ..cfg }.validate().is_err());
}
