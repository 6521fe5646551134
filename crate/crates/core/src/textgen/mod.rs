//! Class-conditioned prompting against a language-model backend, and
//! perplexity / bits-per-character scoring of what comes back.

mod ngram;
mod remote;

use std::fmt::Write as _;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::ClassPrediction;
use crate::dsp::EpochTensor;
use crate::ingest::LabelMap;
use crate::model::Model;
use crate::params::ModelError;

pub use ngram::{NgramModel, BOS, EOS, UNK};
pub use remote::RemoteBackend;

pub const PLACEHOLDER: &str = "[CLASS]";
pub const DEFAULT_TEMPLATE: &str =
    "Based on EEG signals classified as [CLASS], generate a relevant descriptive sentence: ";
/// Short descriptive sentences about every category, one per line. The
/// builtin backend trains on this when no corpus is given.
pub const DEFAULT_CORPUS: &str = include_str!("corpus.txt");

#[derive(Debug, thiserror::Error)]
pub enum TextgenError {
    #[error("prompt template must contain {PLACEHOLDER} exactly once, found {0}")]
    Template(usize),
    #[error("prediction for class {0} has no class name")]
    NoClassName(usize),
    #[error("corpus is empty or shorter than the n-gram order")]
    EmptyCorpus,
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("{endpoint}: {msg}")]
    Transport { endpoint: String, msg: String },
    #[error("{endpoint}: HTTP status {code}")]
    Status { endpoint: String, code: u16 },
    #[error("{endpoint}: malformed response: {msg}")]
    Response { endpoint: String, msg: String },
    #[error("backend {0} returned no log-probabilities")]
    NoLogprobs(String),
    #[error("perplexity of an empty sequence")]
    EmptySequence,
    #[error("log-probability {0} is positive")]
    PositiveLogprob(f64),
    #[error("perplexity {0} is below 1")]
    PerplexityBelowOne(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, TextgenError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    template: String,
}

impl PromptTemplate {
    pub fn new(template: &str) -> Result<PromptTemplate> {
        match template.matches(PLACEHOLDER).count() {
            1 => Ok(PromptTemplate {
                template: template.to_string(),
            }),
            n => Err(TextgenError::Template(n)),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.template
    }

    /// Single-pass substitution: text inside `class_name` is never expanded.
    pub fn fill(&self, class_name: &str) -> String {
        let (head, tail) = self
            .template
            .split_once(PLACEHOLDER)
            .expect("validated on construction");
        format!("{head}{class_name}{tail}")
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::new(DEFAULT_TEMPLATE).expect("default template is valid")
    }
}

/// Fills the template with the arg-max class name. The probability vector
/// is not part of the prompt.
pub fn build_prompt(template: &PromptTemplate, prediction: &ClassPrediction) -> Result<String> {
    let name = prediction
        .class_name
        .as_deref()
        .ok_or(TextgenError::NoClassName(prediction.label))?;
    Ok(template.fill(name))
}

/// `exp(−(1/t)·Σ log p)`.
pub fn perplexity(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(TextgenError::EmptySequence);
    }
    if let Some(&bad) = logprobs.iter().find(|&&l| l > 0.0 || l.is_nan()) {
        return Err(TextgenError::PositiveLogprob(bad));
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok((-mean).exp())
}

/// Cross-entropy form of perplexity for an empirical distribution `p`
/// scored under `q`: `exp(−Σ p(x)·ln q(x))`, skipping `p(x) = 0`.
pub fn perplexity_from_distributions(p: &[f64], q: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| -pi * qi.ln())
        .sum();
    h.exp()
}

/// Bits per character, `log₂ PPL`.
pub fn bpc(ppl: f64) -> Result<f64> {
    if !(ppl >= 1.0) {
        return Err(TextgenError::PerplexityBelowOne(ppl));
    }
    Ok(ppl.log2())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    BuiltinNgram,
    /// Every token equally likely: a smoke-test backend.
    Uniform,
    Remote,
}

impl std::str::FromStr for BackendKind {
    type Err = TextgenError;

    fn from_str(s: &str) -> Result<BackendKind> {
        match s {
            "builtin" | "builtin-ngram" => Ok(BackendKind::BuiltinNgram),
            "uniform" => Ok(BackendKind::Uniform),
            "remote" => Ok(BackendKind::Remote),
            other => Err(TextgenError::Config(format!("unknown backend {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub url: Option<String>,
    pub token: Option<String>,
    pub model: String,
    pub timeout_s: f64,
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    pub order: usize,
    pub smoothing: f64,
    /// Remote requests in flight at once.
    pub max_concurrent: usize,
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec {
            kind: BackendKind::BuiltinNgram,
            url: None,
            token: None,
            model: "gemma-2b".into(),
            timeout_s: 30.0,
            max_tokens: 64,
            temperature: 1.0,
            seed: 0,
            order: 3,
            smoothing: 1.0,
            max_concurrent: 4,
        }
    }
}

/// A ready-to-use backend.
#[derive(Debug, Clone)]
pub enum Backend {
    Ngram {
        model: NgramModel,
        seed: u64,
        temperature: f64,
    },
    Remote(RemoteBackend),
}

impl Backend {
    /// Builds the backend named by `spec`. Local kinds need `corpus`: the
    /// n-gram trains on it, the uniform model takes its alphabet.
    pub fn from_spec(spec: &BackendSpec, corpus: Option<&str>) -> Result<Backend> {
        if !(spec.temperature > 0.0) {
            return Err(TextgenError::Config("temperature must be positive".into()));
        }
        let local = |model: NgramModel| Backend::Ngram {
            model,
            seed: spec.seed,
            temperature: spec.temperature,
        };
        match spec.kind {
            BackendKind::BuiltinNgram => {
                let corpus =
                    corpus.ok_or_else(|| TextgenError::Config("the builtin backend needs a training corpus".into()))?;
                Ok(local(NgramModel::train(corpus, spec.order, spec.smoothing)?))
            }
            BackendKind::Uniform => {
                let corpus = corpus
                    .ok_or_else(|| TextgenError::Config("the uniform backend needs an alphabet corpus".into()))?;
                let chars = corpus.chars().filter(|c| *c != '\n' && *c != '\r');
                Ok(local(NgramModel::uniform(chars, spec.order, spec.smoothing)?))
            }
            BackendKind::Remote => {
                let url = spec
                    .url
                    .clone()
                    .filter(|u| !u.is_empty())
                    .ok_or_else(|| TextgenError::Config("the remote backend needs a URL".into()))?;
                if !(spec.timeout_s > 0.0) {
                    return Err(TextgenError::Config("timeout must be positive".into()));
                }
                Ok(Backend::Remote(RemoteBackend {
                    url,
                    token: spec.token.clone(),
                    model: spec.model.clone(),
                    timeout: Duration::from_secs_f64(spec.timeout_s),
                    temperature: spec.temperature,
                }))
            }
        }
    }

    pub fn id(&self) -> String {
        match self {
            Backend::Ngram { model, .. } => format!("ngram-{}", model.order),
            Backend::Remote(r) => format!("remote:{}", r.model),
        }
    }

    /// Completes `prompt`. Local sampling is seeded from the backend seed
    /// and the prompt text, so a prompt always gets the same continuation.
    pub fn complete(&self, prompt: &str, max_tokens: usize) -> Result<Completion> {
        match self {
            Backend::Ngram {
                model,
                seed,
                temperature,
            } => {
                let digest = Sha256::digest(prompt.as_bytes());
                let mix = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ mix);
                let (toks, lps) = model.sample(prompt, max_tokens, *temperature, &mut rng);
                Ok(Completion {
                    tokens: toks.iter().map(|&t| model.token_str(t)).collect(),
                    logprobs: Some(lps),
                })
            }
            Backend::Remote(r) => {
                let (tokens, logprobs) = r.complete(prompt, max_tokens)?;
                Ok(Completion { tokens, logprobs })
            }
        }
    }

    /// Log-probabilities of a given continuation; local backends only.
    pub fn score(&self, prompt: &str, text: &str) -> Result<Vec<f64>> {
        match self {
            Backend::Ngram { model, .. } => Ok(model.score(prompt, text)),
            Backend::Remote(_) => Err(TextgenError::NoLogprobs(self.id())),
        }
    }

    /// Completes every prompt. Remote requests run on up to `max_concurrent`
    /// threads; results keep the prompt order.
    pub fn complete_all(
        &self,
        prompts: &[String],
        max_tokens: usize,
        max_concurrent: usize,
    ) -> Vec<Result<Completion>> {
        match self {
            Backend::Remote(_) if max_concurrent > 1 => {
                let mut out = Vec::with_capacity(prompts.len());
                for chunk in prompts.chunks(max_concurrent) {
                    std::thread::scope(|s| {
                        let handles: Vec<_> = chunk
                            .iter()
                            .map(|p| s.spawn(move || self.complete(p, max_tokens)))
                            .collect();
                        out.extend(handles.into_iter().map(|h| h.join().expect("request thread panicked")));
                    });
                }
                out
            }
            _ => prompts.iter().map(|p| self.complete(p, max_tokens)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub tokens: Vec<String>,
    pub logprobs: Option<Vec<f64>>,
}

/// One generated continuation and what produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub prompt: String,
    pub class_label: usize,
    pub class_name: String,
    pub class_probs: Vec<f64>,
    pub tokens: Vec<String>,
    /// Natural-log token probabilities; empty when the backend gave none.
    pub logprobs: Vec<f64>,
    pub logprobs_available: bool,
    pub backend: String,
}

impl GenerationResult {
    pub fn perplexity(&self) -> Result<f64> {
        if !self.logprobs_available {
            return Err(TextgenError::NoLogprobs(self.backend.clone()));
        }
        perplexity(&self.logprobs)
    }
}

/// Classifies every trial and completes its prompt.
pub fn generate_for_trials(
    model: &Model,
    epochs: &EpochTensor,
    labels: &LabelMap,
    template: &PromptTemplate,
    backend: &Backend,
    spec: &BackendSpec,
) -> Result<Vec<GenerationResult>> {
    let preds = model.predict(epochs, 32, Some(labels))?;
    let prompts = preds
        .iter()
        .map(|p| build_prompt(template, p))
        .collect::<Result<Vec<_>>>()?;
    let completions = backend.complete_all(&prompts, spec.max_tokens, spec.max_concurrent);
    preds
        .into_iter()
        .zip(prompts)
        .zip(completions)
        .map(|((pred, prompt), c)| {
            let c = c?;
            Ok(GenerationResult {
                prompt,
                class_label: pred.label,
                class_name: pred.class_name.unwrap_or_default(),
                class_probs: pred.probs,
                logprobs_available: c.logprobs.is_some(),
                logprobs: c.logprobs.unwrap_or_default(),
                tokens: c.tokens,
                backend: backend.id(),
            })
        })
        .collect()
}

/// One row of the perplexity table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PplRow {
    pub n_classes: usize,
    pub mean_ppl: f64,
    pub mean_bpc: f64,
    pub n_sequences: usize,
}

/// Mean perplexity over sequences; the BPC column is `log₂` of the mean.
pub fn ppl_row(n_classes: usize, sequences: &[Vec<f64>]) -> Result<PplRow> {
    if sequences.is_empty() {
        return Err(TextgenError::EmptySequence);
    }
    let ppls = sequences.iter().map(|s| perplexity(s)).collect::<Result<Vec<_>>>()?;
    let mean_ppl = ppls.iter().sum::<f64>() / ppls.len() as f64;
    Ok(PplRow {
        n_classes,
        mean_ppl,
        mean_bpc: bpc(mean_ppl)?,
        n_sequences: ppls.len(),
    })
}

/// Scores the continuation for each trial under its class prompt: the
/// supplied reference for that trial's label if `references` is given
/// (indexed by class), otherwise the backend's own generation.
pub fn eval_perplexity_by_class(
    model: &Model,
    epochs: &EpochTensor,
    labels: &LabelMap,
    template: &PromptTemplate,
    backend: &Backend,
    spec: &BackendSpec,
    references: Option<&[String]>,
) -> Result<PplRow> {
    let sequences = match references {
        Some(refs) => {
            let preds = model.predict(epochs, 32, Some(labels))?;
            preds
                .iter()
                .zip(&epochs.labels)
                .map(|(p, &truth)| {
                    let prompt = build_prompt(template, p)?;
                    let text = refs
                        .get(truth)
                        .ok_or_else(|| TextgenError::Config(format!("no reference text for class {truth}")))?;
                    backend.score(&prompt, text)
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => generate_for_trials(model, epochs, labels, template, backend, spec)?
            .into_iter()
            .map(|g| {
                if g.logprobs_available {
                    Ok(g.logprobs)
                } else {
                    Err(TextgenError::NoLogprobs(g.backend))
                }
            })
            .collect::<Result<Vec<_>>>()?,
    };
    ppl_row(model.n_classes(), &sequences)
}

pub const PPL_HEADER: &str = "n_classes,mean_ppl,mean_bpc,n_sequences";

pub fn ppl_csv(rows: &[PplRow]) -> String {
    let mut out = format!("{PPL_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{}",
            r.n_classes, r.mean_ppl, r.mean_bpc, r.n_sequences
        );
    }
    out
}
