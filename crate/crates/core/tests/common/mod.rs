#![allow(dead_code)]

use neurotext::tensor::{finite_diff, max_relative_error, Precision, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draws on `[-scale, scale]`, double precision.
pub fn random(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
        Precision::Double,
    )
    .unwrap()
}

/// Largest norm-wise relative error between reverse-mode and central
/// finite-difference gradients over every leaf. `build` maps the leaves to a
/// scalar. A leaf whose analytic and numeric gradients both stay below
/// `1e-8` (a bias feeding batch norm, say) counts as exact.
pub fn grad_check(leaves: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root).unwrap();
    let mut worst = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .raw(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let numeric = finite_diff(
            |t| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = leaves
                    .iter()
                    .enumerate()
                    .map(|(j, l)| tape.param(if j == i { t.clone() } else { l.clone() }))
                    .collect();
                let root = build(&mut tape, &vars);
                tape.data(root)[0]
            },
            leaf,
            1e-6,
        )
        .unwrap();
        let scale = analytic
            .iter()
            .chain(numeric.data())
            .fold(0.0f64, |a, v| a.max(v.abs()));
        if scale >= 1e-8 {
            worst = worst.max(max_relative_error(&analytic, numeric.data()));
        }
    }
    worst
}

/// `Σ R ⊙ y` for a fixed random `R`, so that every output element gets a
/// distinct weight.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let r = random(&mut rng(seed), tape.shape(y), 1.0);
    let r = tape.constant(r);
    let p = tape.mul(y, r).unwrap();
    tape.sum(p).unwrap()
}
