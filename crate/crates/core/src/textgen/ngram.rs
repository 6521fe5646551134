use std::collections::{BTreeSet, HashMap};

use rand::Rng;

use super::{Result, TextgenError};

/// Token ids: three reserved ids, then the characters in sorted order.
pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
const RESERVED: u32 = 3;

/// Character-level n-gram model with Laplace smoothing.
///
/// Each corpus line is one sequence, framed by `order − 1` begin markers and
/// one end marker. The outcome space holds every character seen in training
/// plus the begin, end and unknown-character tokens, so an unseen context
/// predicts `1/V` everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    pub order: usize,
    pub smoothing: f64,
    chars: Vec<char>,
    counts: HashMap<Vec<u32>, HashMap<u32, u64>>,
}

impl NgramModel {
    pub fn train(corpus: &str, order: usize, smoothing: f64) -> Result<NgramModel> {
        if order == 0 {
            return Err(TextgenError::Config("n-gram order must be at least 1".into()));
        }
        if !(smoothing > 0.0) {
            return Err(TextgenError::Config("smoothing must be positive".into()));
        }
        let lines: Vec<&str> = corpus.lines().filter(|l| !l.is_empty()).collect();
        if lines.is_empty() || corpus.chars().filter(|c| *c != '\n' && *c != '\r').count() < order {
            return Err(TextgenError::EmptyCorpus);
        }
        let chars: BTreeSet<char> = lines.iter().flat_map(|l| l.chars()).collect();
        let mut model = NgramModel::uniform(chars, order, smoothing)?;
        for line in lines {
            let mut ctx = vec![BOS; order - 1];
            let toks: Vec<u32> = line.chars().map(|c| model.token(c)).chain([EOS]).collect();
            for tok in toks {
                *model.counts.entry(ctx.clone()).or_default().entry(tok).or_default() += 1;
                if order > 1 {
                    ctx.remove(0);
                    ctx.push(tok);
                }
            }
        }
        Ok(model)
    }

    /// A model with no counts: every conditional is `1/V`.
    pub fn uniform(chars: impl IntoIterator<Item = char>, order: usize, smoothing: f64) -> Result<NgramModel> {
        if order == 0 || !(smoothing > 0.0) {
            return Err(TextgenError::Config("need order >= 1 and smoothing > 0".into()));
        }
        let chars: BTreeSet<char> = chars.into_iter().collect();
        Ok(NgramModel {
            order,
            smoothing,
            chars: chars.into_iter().collect(),
            counts: HashMap::new(),
        })
    }

    /// Outcome-space size, reserved tokens included.
    pub fn vocab_size(&self) -> usize {
        self.chars.len() + RESERVED as usize
    }

    pub fn token(&self, c: char) -> u32 {
        match self.chars.binary_search(&c) {
            Ok(i) => i as u32 + RESERVED,
            Err(_) => UNK,
        }
    }

    /// Display form of a token.
    pub fn token_str(&self, tok: u32) -> String {
        match tok {
            BOS => "<s>".into(),
            EOS => "</s>".into(),
            UNK => "<unk>".into(),
            t => self.chars[(t - RESERVED) as usize].to_string(),
        }
    }

    pub fn count(&self, context: &[u32], next: u32) -> u64 {
        self.counts
            .get(context)
            .and_then(|m| m.get(&next))
            .copied()
            .unwrap_or(0)
    }

    pub fn context_total(&self, context: &[u32]) -> u64 {
        self.counts.get(context).map_or(0, |m| m.values().sum())
    }

    /// `(c(ctx, next) + k) / (c(ctx) + k·V)`.
    pub fn prob(&self, context: &[u32], next: u32) -> f64 {
        let v = self.vocab_size() as f64;
        (self.count(context, next) as f64 + self.smoothing) / (self.context_total(context) as f64 + self.smoothing * v)
    }

    /// The full conditional distribution over token ids `0..V`.
    pub fn distribution(&self, context: &[u32]) -> Vec<f64> {
        (0..self.vocab_size() as u32).map(|t| self.prob(context, t)).collect()
    }

    /// Begin markers followed by `prefix`, cut to the last `order − 1`
    /// tokens. A context the corpus never produced is replaced by the
    /// line-start context, so an unfamiliar prompt still leads into text.
    pub fn context_after(&self, prefix: &str) -> Vec<u32> {
        let start = vec![BOS; self.order - 1];
        let mut ctx = start.clone();
        ctx.extend(prefix.chars().map(|c| self.token(c)));
        let ctx = ctx.split_off(ctx.len() - (self.order - 1));
        if self.counts.contains_key(&ctx) {
            ctx
        } else {
            start
        }
    }

    fn advance(&self, ctx: &mut Vec<u32>, tok: u32) {
        if self.order > 1 {
            ctx.remove(0);
            ctx.push(tok);
        }
    }

    /// Natural-log probabilities of each character of `text` and then the
    /// end marker, starting from the context left by `prompt`.
    pub fn score(&self, prompt: &str, text: &str) -> Vec<f64> {
        let mut ctx = self.context_after(prompt);
        let mut out = Vec::with_capacity(text.chars().count() + 1);
        for tok in text.chars().map(|c| self.token(c)).chain([EOS]) {
            out.push(self.prob(&ctx, tok).ln());
            self.advance(&mut ctx, tok);
        }
        out
    }

    /// Samples up to `max_tokens` tokens after `prompt`. Sampling stops after
    /// a begin or end marker is drawn; that marker is included. `temperature`
    /// reshapes the sampling distribution only: the reported log-probabilities
    /// are the model's own.
    pub fn sample(
        &self,
        prompt: &str,
        max_tokens: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> (Vec<u32>, Vec<f64>) {
        let mut ctx = self.context_after(prompt);
        let (mut toks, mut lps) = (Vec::new(), Vec::new());
        for _ in 0..max_tokens {
            let dist = self.distribution(&ctx);
            let weights: Vec<f64> = if temperature == 1.0 {
                dist.clone()
            } else {
                dist.iter().map(|p| p.powf(1.0 / temperature)).collect()
            };
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            let mut tok = weights.len() as u32 - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    tok = i as u32;
                    break;
                }
                u -= w;
            }
            toks.push(tok);
            lps.push(dist[tok as usize].ln());
            if tok == EOS || tok == BOS {
                break;
            }
            self.advance(&mut ctx, tok);
        }
        (toks, lps)
    }

    /// Every context with at least one count.
    pub fn contexts(&self) -> impl Iterator<Item = &Vec<u32>> {
        self.counts.keys()
    }
}
