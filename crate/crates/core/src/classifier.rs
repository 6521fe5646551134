//! Dense ELU head with dropout, L2 penalty, max-norm projection, softmax
//! output and cross-entropy loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::dropout;
use crate::ingest::LabelMap;
use crate::params::{glorot, uniform, Bound, Mode, ModelError, ModelParams, ParamKind, Result};
use crate::tensor::{Precision, Tape, Tensor, Var};

pub use crate::tensor::{elu, softmax};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    pub dropout_p: f64,
    pub l2_lambda: f64,
    pub maxnorm_c: f64,
    pub elu_alpha: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: vec![128, 64],
            n_classes: 2,
            dropout_p: 0.3,
            l2_lambda: 0.001,
            maxnorm_c: 3.0,
            elu_alpha: 1.0,
        }
    }
}

impl ClassifierConfig {
    /// Head sized for [`EncoderConfig::desk`](crate::encoder::EncoderConfig::desk).
    pub fn desk(n_classes: usize) -> ClassifierConfig {
        ClassifierConfig {
            hidden: vec![16, 16],
            n_classes,
            ..ClassifierConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(ModelError::Config("n_classes must be at least 2".into()));
        }
        if self.hidden.contains(&0) {
            return Err(ModelError::Config("hidden widths must be positive".into()));
        }
        if !(self.l2_lambda >= 0.0) || !(self.maxnorm_c > 0.0) || !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::Config(
                "need l2_lambda >= 0, maxnorm_c > 0 and dropout_p in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// `(name prefix, in, out)` for every dense layer, output layer last.
    pub fn layers(&self, input_dim: usize) -> Vec<(String, usize, usize)> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.n_classes);
        dims.windows(2)
            .enumerate()
            .map(|(i, w)| {
                let name = if i == self.hidden.len() {
                    "classifier.output".to_string()
                } else {
                    format!("classifier.dense{i}")
                };
                (name, w[0], w[1])
            })
            .collect()
    }
}

pub fn init_classifier(
    cfg: &ClassifierConfig,
    input_dim: usize,
    rng: &mut impl Rng,
    precision: Precision,
    params: &mut ModelParams,
) -> Result<()> {
    cfg.validate()?;
    for (name, i, o) in cfg.layers(input_dim) {
        params.insert(
            &format!("{name}.kernel"),
            ParamKind::DenseKernel,
            uniform(rng, &[i, o], glorot(i, o), precision),
        );
        params.insert(&format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[o], precision));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Elu(f64),
    Identity,
}

/// `act(h·W + b)` for an `(N, in)` batch and an `(in, out)` kernel.
pub fn dense_forward(tape: &mut Tape, h: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
    let z = tape.matmul(h, w)?;
    let z = tape.add(z, b)?;
    Ok(match act {
        Activation::Elu(alpha) => tape.elu(z, alpha)?,
        Activation::Identity => z,
    })
}

/// Embeddings to logits: hidden ELU layers (dropout after the first), then
/// the linear output layer.
pub fn head_logits(
    tape: &mut Tape,
    cfg: &ClassifierConfig,
    bound: &Bound,
    embedding: Var,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    let input_dim = tape.shape(embedding)[1];
    let layers = cfg.layers(input_dim);
    let mut h = embedding;
    for (i, (name, _, _)) in layers.iter().enumerate() {
        let last = i + 1 == layers.len();
        let act = if last {
            Activation::Identity
        } else {
            Activation::Elu(cfg.elu_alpha)
        };
        h = dense_forward(
            tape,
            h,
            bound.var(&format!("{name}.kernel"))?,
            bound.var(&format!("{name}.bias"))?,
            act,
        )?;
        if i == 0 && !last {
            h = dropout(tape, h, cfg.dropout_p, mode, rng)?;
        }
    }
    Ok(h)
}

/// `λ · Σ‖W‖²` over conv and dense kernels, or `None` when `λ = 0` or
/// nothing is penalized.
pub fn l2_penalty(tape: &mut Tape, params: &ModelParams, bound: &Bound, lambda: f64) -> Result<Option<Var>> {
    if lambda == 0.0 {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for p in params.iter().filter(|p| p.kind.penalized()) {
        let sq = tape.sum_squares(bound.var(&p.name)?)?;
        total = Some(match total {
            Some(t) => tape.add(t, sq)?,
            None => sq,
        });
    }
    total.map(|t| tape.scale(t, lambda)).transpose().map_err(Into::into)
}

/// The same penalty computed without a tape.
pub fn l2_value(params: &ModelParams, lambda: f64) -> f64 {
    lambda
        * params
            .iter()
            .filter(|p| p.kind.penalized())
            .map(|p| p.value.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
}

/// Rescales each column of an `(in, out)` kernel whose Euclidean norm
/// exceeds `c` down to norm `c`. In single precision the scaled column is
/// nudged down until rounding no longer pushes it above `c`.
pub fn maxnorm_project(w: &Tensor, c: f64) -> Tensor {
    let (rows, cols) = match *w.shape() {
        [r, c] => (r, c),
        _ => return w.clone(),
    };
    let precision = w.precision();
    let mut data = w.to_vec();
    let norm_of = |data: &[f64], j: usize| (0..rows).map(|i| data[i * cols + j].powi(2)).sum::<f64>().sqrt();
    for j in 0..cols {
        let norm = norm_of(&data, j);
        if norm > c {
            let orig: Vec<f64> = (0..rows).map(|i| data[i * cols + j]).collect();
            let mut s = c / norm;
            loop {
                for i in 0..rows {
                    data[i * cols + j] = precision.round(orig[i] * s);
                }
                if precision == Precision::Double || norm_of(&data, j) <= c {
                    break;
                }
                s *= 1.0 - f64::from(f32::EPSILON);
            }
        }
    }
    Tensor::new(w.shape(), data, w.precision()).expect("scaling keeps values finite")
}

/// Applies [`maxnorm_project`] to every dense kernel.
pub fn maxnorm_all(params: &mut ModelParams, c: f64) {
    for p in params.iter_mut().filter(|p| p.kind == ParamKind::DenseKernel) {
        p.value = maxnorm_project(&p.value, c);
    }
}

pub fn max_column_norm(w: &Tensor) -> f64 {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..cols)
        .map(|j| (0..rows).map(|i| w.data()[i * cols + j].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Mean negative log-probability of the true classes, log argument clamped
/// at `1e-12`.
pub fn cross_entropy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(ModelError::Config("probabilities and labels differ in count".into()));
    }
    let mut total = 0.0;
    for (p, &l) in probs.iter().zip(labels) {
        let q = p
            .get(l)
            .ok_or_else(|| ModelError::Config(format!("label {l} outside 0..{}", p.len())))?;
        total -= q.max(1e-12).ln();
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrediction {
    pub probs: Vec<f64>,
    pub label: usize,
    pub class_name: Option<String>,
}

impl ClassPrediction {
    /// Arg-max with ties going to the lowest index.
    pub fn from_probs(probs: Vec<f64>, labels: Option<&LabelMap>) -> ClassPrediction {
        let label = probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best });
        let class_name = labels.and_then(|m| m.class_name(label)).map(str::to_string);
        ClassPrediction {
            probs,
            label,
            class_name,
        }
    }
}

/// Infers predictions for an embedding batch.
pub fn classify(
    cfg: &ClassifierConfig,
    params: &ModelParams,
    embeddings: &Tensor,
    labels: Option<&LabelMap>,
) -> Result<Vec<ClassPrediction>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(embeddings.clone());
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let logits = head_logits(&mut tape, cfg, &bound, x, Mode::Infer, &mut rng)?;
    let probs = tape.softmax(logits)?;
    Ok(tape
        .data(probs)
        .chunks(cfg.n_classes)
        .map(|p| ClassPrediction::from_probs(p.to_vec(), labels))
        .collect())
}
