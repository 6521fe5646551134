use serde::{Deserialize, Serialize};

use crate::params::ModelParams;
use crate::tensor::{Tensor, TensorError};

use super::TrainConfig;

/// First and second moment estimates per parameter array (empty for arrays
/// the optimizer does not touch) and the number of steps taken.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> AdamState {
        let zeros = |p: &crate::params::Param| {
            if p.kind.trainable() {
                vec![0.0; p.value.numel()]
            } else {
                Vec::new()
            }
        };
        AdamState {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }
}

/// One Adam update of a flat array at step `t ≥ 1`:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `θ ← θ − lr·m̂/(√v̂ + ε)` with bias-corrected `m̂`, `v̂`.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &TrainConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        theta[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
    }
}

/// Advances the step counter and updates every trainable array that has a
/// gradient. Updated values are re-rounded to each array's precision; a
/// non-finite result is an error and leaves that array unchanged.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TensorError> {
    state.step += 1;
    let t = state.step;
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else {
            continue;
        };
        if !p.kind.trainable() {
            continue;
        }
        let mut theta = p.value.to_vec();
        adam_update(&mut theta, g, &mut state.m[i], &mut state.v[i], t, lr, cfg);
        p.value = Tensor::new(p.value.shape(), theta, p.value.precision())?;
    }
    Ok(())
}
