//! Named parameter arrays shared by the encoder, the classifier head and the
//! trainer.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Precision, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no parameter named {0}")]
    MissingParam(String),
    #[error("{stage}: expected shape {expected:?}, got {got:?}")]
    Shape {
        stage: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// What a parameter array is, which decides how regularization and the
/// optimizer treat it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Convolution kernels: L2-penalized.
    ConvKernel,
    /// Dense kernels, `(in, out)`: L2-penalized and max-norm projected per
    /// output column.
    DenseKernel,
    /// LSTM gate matrices: trained, not penalized.
    RecurrentKernel,
    Bias,
    BnScale,
    BnShift,
    /// Batch-norm running moments: updated by the forward pass, not by the
    /// optimizer.
    BnRunning,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::BnRunning
    }

    pub fn penalized(self) -> bool {
        matches!(self, ParamKind::ConvKernel | ParamKind::DenseKernel)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered parameter collection. Order is insertion order and is the order
/// used in checkpoints and optimizer state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> ModelParams {
        ModelParams::default()
    }

    pub fn insert(&mut self, name: &str, kind: ParamKind, value: Tensor) {
        let value = value.with_grad(false);
        match self.index.get(name) {
            Some(&i) => {
                self.params[i] = Param {
                    name: name.to_string(),
                    kind,
                    value,
                }
            }
            None => {
                self.index.insert(name.to_string(), self.params.len());
                self.params.push(Param {
                    name: name.to_string(),
                    kind,
                    value,
                });
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].value)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        if value.shape() != self.params[i].value.shape() {
            return Err(ModelError::Shape {
                stage: name.to_string(),
                expected: self.params[i].value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        self.params[i].value = value.with_grad(false);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Scalar count over every array, running statistics included.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Re-rounds every array to `precision`.
    pub fn cast(&mut self, precision: Precision) {
        for p in &mut self.params {
            p.value = p.value.cast(precision);
        }
    }

    /// Puts every array on `tape`: trainable ones as gradient-tracking
    /// leaves, running statistics as constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.kind.trainable() {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Tape handles for a [`ModelParams`], in the same order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform draws on `[-limit, limit]`.
pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], limit: f64, precision: Precision) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(shape, data, precision).expect("finite draws")
}

/// Glorot-uniform limit.
pub(crate) fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Train or inference behaviour for dropout and batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
