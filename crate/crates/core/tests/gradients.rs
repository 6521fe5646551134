//! Reverse-mode gradients against central finite differences, layer by layer
//! and for the whole model, in double precision.

mod common;

use common::{grad_check, random, rng, weighted_sum};
use neurotext::classifier::{dense_forward, l2_penalty, l2_value, Activation};
use neurotext::encoder::{
    avg_pool4, conv_block, depthwise_conv, lstm_layer_fused, lstm_step, separable_conv, LstmImpl, LstmLayer,
};
use neurotext::model::{Model, ModelConfig};
use neurotext::params::{Mode, ModelParams, ParamKind};
use neurotext::tensor::{finite_diff, max_relative_error, BatchNormMode, Precision, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

#[test]
fn conv_block_gradients() {
    let mut r = rng(1);
    let leaves = [
        random(&mut r, &[2, 5, 12, 1], 1.0),
        random(&mut r, &[5, 1, 3], 0.5),
        random(&mut r, &[3], 0.1),
        random(&mut r, &[3], 1.0),
        random(&mut r, &[3], 0.5),
    ];
    let err = grad_check(&leaves, |tape, v| {
        let (y, _) = conv_block(tape, v[0], v[1], v[2], v[3], v[4], &BatchNormMode::Train, 1e-3).unwrap();
        weighted_sum(tape, y, 11)
    });
    assert!(err <= TOL, "{err}");
}

#[test]
fn batch_norm_gradients_in_both_modes() {
    let mut r = rng(2);
    let leaves = [
        random(&mut r, &[3, 2, 4, 3], 2.0),
        random(&mut r, &[3], 1.0),
        random(&mut r, &[3], 1.0),
    ];
    for mode in [
        BatchNormMode::Train,
        BatchNormMode::Infer {
            mean: vec![0.1, -0.2, 0.3],
            var: vec![0.5, 1.5, 2.0],
        },
    ] {
        let err = grad_check(&leaves, |tape, v| {
            let (y, _) = tape.batch_norm(v[0], v[1], v[2], &mode, 1e-3).unwrap();
            weighted_sum(tape, y, 12)
        });
        assert!(err <= TOL, "{mode:?}: {err}");
    }
}

#[test]
fn depthwise_gradients() {
    let mut r = rng(3);
    let leaves = [random(&mut r, &[2, 5, 10, 3], 1.0), random(&mut r, &[4, 3, 2], 0.5)];
    let err = grad_check(&leaves, |tape, v| {
        let y = depthwise_conv(tape, v[0], v[1]).unwrap();
        weighted_sum(tape, y, 13)
    });
    assert!(err <= TOL, "{err}");
}

fn lstm_leaves(r: &mut ChaCha8Rng, b: usize, t: usize, f: usize, u: usize) -> Vec<Tensor> {
    let mut leaves = vec![random(r, &[b, t, f], 1.0)];
    leaves.extend((0..4).map(|_| random(r, &[u + f, u], 0.6)));
    leaves.extend((0..4).map(|_| random(r, &[u], 0.3)));
    leaves
}

fn layer(v: &[neurotext::tensor::Var]) -> LstmLayer {
    LstmLayer {
        w: [v[1], v[2], v[3], v[4]],
        b: [v[5], v[6], v[7], v[8]],
    }
}

#[test]
fn five_lstm_steps_gradients() {
    let mut r = rng(4);
    let (b, t, f, u) = (2, 5, 3, 4);
    let leaves = lstm_leaves(&mut r, b, t, f, u);
    let err = grad_check(&leaves, |tape, v| {
        let l = layer(v);
        let mut h = tape.constant(Tensor::zeros(&[b, u], Precision::Double));
        let mut c = h;
        let mut outs = Vec::new();
        for s in 0..t {
            let xt = tape.select(v[0], 1, s).unwrap();
            (h, c) = lstm_step(tape, xt, h, c, &l).unwrap();
            outs.push(h);
        }
        let hs = tape.stack(&outs, 1).unwrap();
        weighted_sum(tape, hs, 14)
    });
    assert!(err <= TOL, "{err}");
}

#[test]
fn fused_lstm_gradients() {
    let mut r = rng(5);
    let leaves = lstm_leaves(&mut r, 3, 6, 2, 3);
    let err = grad_check(&leaves, |tape, v| {
        let h = lstm_layer_fused(tape, v[0], &layer(v)).unwrap();
        weighted_sum(tape, h, 15)
    });
    assert!(err <= TOL, "{err}");
}

#[test]
fn avg_pool_gradients() {
    let mut r = rng(6);
    let leaves = [random(&mut r, &[2, 5, 14, 2], 1.0)];
    let err = grad_check(&leaves, |tape, v| {
        let y = avg_pool4(tape, v[0]).unwrap();
        weighted_sum(tape, y, 16)
    });
    assert!(err <= TOL, "{err}");
}

#[test]
fn separable_gradients() {
    let mut r = rng(7);
    let leaves = [
        random(&mut r, &[2, 5, 8, 3], 1.0),
        random(&mut r, &[4, 3, 1], 0.5),
        random(&mut r, &[3, 4], 0.5),
    ];
    let err = grad_check(&leaves, |tape, v| {
        let y = separable_conv(tape, v[0], v[1], v[2]).unwrap();
        weighted_sum(tape, y, 17)
    });
    assert!(err <= TOL, "{err}");
}

#[test]
fn dense_gradients() {
    let mut r = rng(8);
    let leaves = [
        random(&mut r, &[4, 6], 1.0),
        random(&mut r, &[6, 5], 0.5),
        random(&mut r, &[5], 0.3),
    ];
    for act in [Activation::Elu(1.0), Activation::Identity] {
        let err = grad_check(&leaves, |tape, v| {
            let y = dense_forward(tape, v[0], v[1], v[2], act).unwrap();
            weighted_sum(tape, y, 18)
        });
        assert!(err <= TOL, "{act:?}: {err}");
    }
}

#[test]
fn softmax_cross_entropy_gradients() {
    let mut r = rng(9);
    for n_classes in [2, 5] {
        let labels: Vec<usize> = (0..4).map(|i| i % n_classes).collect();
        let leaves = [random(&mut r, &[4, n_classes], 2.0)];
        let err = grad_check(&leaves, |tape, v| {
            let p = tape.softmax(v[0]).unwrap();
            tape.cross_entropy(p, &labels).unwrap()
        });
        assert!(err <= TOL, "{n_classes}: {err}");
    }
}

#[test]
fn l2_penalty_gradients() {
    let mut r = rng(10);
    let kernels = [
        random(&mut r, &[3, 1, 2], 1.0),
        random(&mut r, &[4, 3], 1.0),
        random(&mut r, &[3], 1.0),
    ];
    let build = |k: &[Tensor]| {
        let mut params = ModelParams::new();
        params.insert("a", ParamKind::ConvKernel, k[0].clone());
        params.insert("b", ParamKind::DenseKernel, k[1].clone());
        params.insert("c", ParamKind::Bias, k[2].clone());
        params
    };
    let params = build(&kernels);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let pen = l2_penalty(&mut tape, &params, &bound, 0.01).unwrap().unwrap();
    let g = tape.backward(pen).unwrap();
    for (i, name) in ["a", "b"].iter().enumerate() {
        let analytic = g.raw(bound.var(name).unwrap()).unwrap();
        let numeric = finite_diff(
            |t| {
                let mut k = kernels.clone();
                k[i] = t.clone();
                l2_value(&build(&k), 0.01)
            },
            &kernels[i],
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(analytic, numeric.data()) <= TOL, "{name}");
        let closed: Vec<f64> = kernels[i].data().iter().map(|w| 0.02 * w).collect();
        assert!(max_relative_error(analytic, &closed) <= 1e-12);
    }
    // Biases are not penalized.
    assert!(g.raw(bound.var("c").unwrap()).is_none());
}

fn model_loss(model: &Model, x: &Tensor, labels: &[usize], lstm: LstmImpl) -> (f64, Vec<Option<Vec<f64>>>) {
    let mut tape = Tape::new();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(99);
    let fwd = model
        .forward(&mut tape, x, Mode::Train, lstm, &mut dropout_rng)
        .unwrap();
    let ce = tape.cross_entropy(fwd.probs, labels).unwrap();
    let pen = l2_penalty(&mut tape, &model.params, &fwd.bound, model.config.classifier.l2_lambda)
        .unwrap()
        .unwrap();
    let loss = tape.add(ce, pen).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = fwd
        .bound
        .vars()
        .iter()
        .map(|&v| grads.raw(v).map(<[f64]>::to_vec))
        .collect();
    (tape.data(loss)[0], g)
}

/// Full encoder and head at T = 32, batch 2, checked on sampled
/// coordinates of every trainable array. Arrays whose analytic and numeric
/// gradients both vanish (conv biases feeding batch norm) pass on an
/// absolute floor.
fn full_model_check(lstm: LstmImpl) {
    let mut cfg = ModelConfig::full(3);
    cfg.encoder.time_len = 32;
    let model = Model::init(cfg, 5, Precision::Double).unwrap();
    let mut r = rng(20);
    let x = random(&mut r, &[2, 5, 32, 1], 1.5);
    let labels = [0, 2];
    let (_, grads) = model_loss(&model, &x, &labels, lstm);
    let h = 1e-6;
    let mut checked = 0;
    for (i, p) in model.params.iter().enumerate() {
        if !p.kind.trainable() {
            assert!(grads[i].is_none());
            continue;
        }
        let g = grads[i]
            .as_ref()
            .unwrap_or_else(|| panic!("no gradient for {}", p.name));
        let picks: Vec<usize> = (0..3.min(p.value.numel()))
            .map(|_| r.gen_range(0..p.value.numel()))
            .collect();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &j in &picks {
            let eval = |delta: f64| {
                let mut m = model.clone();
                let mut data = p.value.to_vec();
                data[j] += delta;
                m.params
                    .set(&p.name, Tensor::new(p.value.shape(), data, Precision::Double).unwrap())
                    .unwrap();
                model_loss(&m, &x, &labels, lstm).0
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
            analytic.push(g[j]);
        }
        let scale = analytic.iter().chain(&numeric).fold(0.0f64, |a, v| a.max(v.abs()));
        let err = max_relative_error(&analytic, &numeric);
        assert!(
            err <= TOL || scale < 1e-7,
            "{}: relative error {err} (analytic {analytic:?}, numeric {numeric:?})",
            p.name
        );
        checked += 1;
    }
    assert_eq!(checked, model.params.iter().filter(|p| p.kind.trainable()).count());
}

#[test]
fn full_model_gradients_fused_lstm() {
    full_model_check(LstmImpl::Fused);
}

#[test]
fn full_model_gradients_composed_lstm() {
    full_model_check(LstmImpl::Composed);
}
