//! Encoder and classifier head wired together.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{head_logits, init_classifier, ClassPrediction, ClassifierConfig};
use crate::dsp::EpochTensor;
use crate::encoder::{encoder_forward, init_encoder, EncoderConfig, LstmImpl};
use crate::ingest::LabelMap;
use crate::params::{Bound, Mode, ModelError, ModelParams, Result};
use crate::tensor::{BatchStats, Precision, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub classifier: ClassifierConfig,
}

impl ModelConfig {
    /// Full-size encoder and head for `n_classes`.
    pub fn full(n_classes: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig::default(),
            classifier: ClassifierConfig {
                n_classes,
                ..ClassifierConfig::default()
            },
        }
    }

    pub fn desk(n_classes: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig::desk(),
            classifier: ClassifierConfig::desk(n_classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Tape handles from one forward pass.
pub struct Forward {
    pub bound: Bound,
    pub embedding: Var,
    pub logits: Var,
    pub probs: Var,
    pub bn_stats: Vec<(String, BatchStats)>,
}

/// Parameter totals by component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub encoder: usize,
    pub classifier: usize,
    pub total: usize,
    pub trainable: usize,
}

impl Model {
    /// Fresh parameters drawn from a ChaCha8 stream seeded with `seed`.
    pub fn init(config: ModelConfig, seed: u64, precision: Precision) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        init_encoder(&config.encoder, &mut rng, precision, &mut params)?;
        init_classifier(
            &config.classifier,
            config.encoder.embedding_dim(),
            &mut rng,
            precision,
            &mut params,
        )?;
        Ok(Model { config, params })
    }

    pub fn n_classes(&self) -> usize {
        self.config.classifier.n_classes
    }

    pub fn param_report(&self) -> ParamReport {
        ParamReport {
            encoder: self.params.count_with_prefix("encoder."),
            classifier: self.params.count_with_prefix("classifier."),
            total: self.params.count(),
            trainable: self.params.trainable_count(),
        }
    }

    /// Records encoder, head and softmax for the batch `x` of shape
    /// `(N, E, T, 1)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mode: Mode,
        lstm: LstmImpl,
        rng: &mut impl Rng,
    ) -> Result<Forward> {
        let bound = self.params.bind(tape);
        let input = tape.constant(x.clone());
        let enc = encoder_forward(tape, &self.config.encoder, &self.params, &bound, input, mode, lstm, rng)?;
        let logits = head_logits(tape, &self.config.classifier, &bound, enc.embedding, mode, rng)?;
        let probs = tape.softmax(logits)?;
        Ok(Forward {
            bound,
            embedding: enc.embedding,
            logits,
            probs,
            bn_stats: enc.bn_stats,
        })
    }

    /// Infer-mode class probabilities for every trial, `batch` trials at a
    /// time.
    pub fn predict_probs(&self, epochs: &EpochTensor, batch: usize) -> Result<Vec<Vec<f64>>> {
        let precision = self.precision();
        let mut out = Vec::with_capacity(epochs.n_trials());
        let idx: Vec<usize> = (0..epochs.n_trials()).collect();
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        for chunk in idx.chunks(batch.max(1)) {
            let x = epochs.select(chunk).to_tensor(precision);
            let mut tape = Tape::new();
            let fwd = self.forward(&mut tape, &x, Mode::Infer, LstmImpl::Fused, &mut rng)?;
            out.extend(tape.data(fwd.probs).chunks(self.n_classes()).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    pub fn predict(
        &self,
        epochs: &EpochTensor,
        batch: usize,
        labels: Option<&LabelMap>,
    ) -> Result<Vec<ClassPrediction>> {
        Ok(self
            .predict_probs(epochs, batch)?
            .into_iter()
            .map(|p| ClassPrediction::from_probs(p, labels))
            .collect())
    }

    pub fn precision(&self) -> Precision {
        self.params
            .iter()
            .next()
            .map_or(Precision::Double, |p| p.value.precision())
    }

    /// Checks every array named by the configuration exists with the shape a
    /// fresh model would give it.
    pub fn check_shapes(&self) -> Result<()> {
        let fresh = Model::init(self.config.clone(), 0, Precision::Double)?;
        if fresh.params.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} arrays, found {}",
                fresh.params.len(),
                self.params.len()
            )));
        }
        for p in fresh.params.iter() {
            let got = self.params.get(&p.name)?;
            if got.shape() != p.value.shape() {
                return Err(ModelError::Shape {
                    stage: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    got: got.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}
