//! Feature extractor: three parallel temporal conv blocks (conv, batch norm,
//! ELU), channel concatenation, depthwise conv, a stacked LSTM run per
//! electrode, stride-4 average pooling, dropout, separable conv, and a time
//! average that yields one embedding per trial.

mod lstm;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{glorot, uniform, Bound, Mode, ModelError, ModelParams, ParamKind, Result};
use crate::tensor::{BatchNormMode, BatchStats, Precision, Tape, Tensor, Var};

pub use lstm::{lstm_layer_fused, lstm_sequence, lstm_step, LstmLayer};

const GATES: [&str; 4] = ["f", "i", "C", "o"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub electrodes: usize,
    pub time_len: usize,
    pub block_filters: Vec<usize>,
    pub kernel_time: usize,
    pub depth_multiplier: usize,
    pub lstm_units: usize,
    pub lstm_layers: usize,
    pub pool: usize,
    pub dropout_p: f64,
    pub sep_kernel: usize,
    pub sep_channels: usize,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            electrodes: 5,
            time_len: 384,
            block_filters: vec![8, 16, 32],
            kernel_time: 64,
            depth_multiplier: 2,
            lstm_units: 64,
            lstm_layers: 2,
            pool: 4,
            dropout_p: 0.5,
            sep_kernel: 16,
            sep_channels: 112,
            bn_epsilon: 1e-3,
            bn_momentum: 0.99,
        }
    }
}

impl EncoderConfig {
    /// A narrow variant with the same stages (one LSTM layer), small enough
    /// to train dozens of models on one CPU core in minutes.
    pub fn desk() -> EncoderConfig {
        EncoderConfig {
            block_filters: vec![1, 1, 2],
            kernel_time: 32,
            depth_multiplier: 1,
            lstm_units: 4,
            lstm_layers: 1,
            sep_kernel: 8,
            sep_channels: 8,
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.electrodes == 0 || self.time_len == 0 {
            return bad("electrodes and time_len must be positive");
        }
        if self.block_filters.is_empty() || self.block_filters.contains(&0) {
            return bad("block_filters must be non-empty and positive");
        }
        if self.kernel_time == 0 || self.sep_kernel == 0 {
            return bad("kernel sizes must be at least 1");
        }
        if self.depth_multiplier == 0 {
            return bad("depth_multiplier must be at least 1");
        }
        if self.lstm_units == 0 || self.lstm_layers == 0 {
            return bad("lstm_units and lstm_layers must be at least 1");
        }
        if self.pool == 0 || self.time_len < self.pool {
            return bad("pool must be in 1..=time_len");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1)");
        }
        if self.sep_channels == 0 {
            return bad("sep_channels must be at least 1");
        }
        if !(self.bn_epsilon > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return bad("bn_epsilon must be positive and bn_momentum in [0, 1)");
        }
        Ok(())
    }

    /// Channels after concatenating the conv blocks.
    pub fn concat_channels(&self) -> usize {
        self.block_filters.iter().sum()
    }

    pub fn depthwise_channels(&self) -> usize {
        self.concat_channels() * self.depth_multiplier
    }

    pub fn pooled_len(&self) -> usize {
        self.time_len / self.pool
    }

    pub fn embedding_dim(&self) -> usize {
        self.electrodes * self.sep_channels
    }

    /// Output shape of every stage for a batch of `n`, computed from the
    /// configuration alone.
    pub fn stage_shapes(&self, n: usize) -> Vec<(&'static str, Vec<usize>)> {
        let (e, t) = (self.electrodes, self.time_len);
        vec![
            ("input", vec![n, e, t, 1]),
            ("concat", vec![n, e, t, self.concat_channels()]),
            ("depthwise", vec![n, e, t, self.depthwise_channels()]),
            ("lstm", vec![n * e, t, self.lstm_units]),
            ("pool", vec![n, e, self.pooled_len(), self.lstm_units]),
            ("separable", vec![n, e, self.pooled_len(), self.sep_channels]),
            ("embedding", vec![n, self.embedding_dim()]),
        ]
    }
}

/// Adds freshly initialized encoder arrays to `params`.
pub fn init_encoder(
    cfg: &EncoderConfig,
    rng: &mut impl Rng,
    precision: Precision,
    params: &mut ModelParams,
) -> Result<()> {
    cfg.validate()?;
    let k = cfg.kernel_time;
    for (i, &f) in cfg.block_filters.iter().enumerate() {
        let p = format!("encoder.block{i}");
        params.insert(
            &format!("{p}.kernel"),
            ParamKind::ConvKernel,
            uniform(rng, &[k, 1, f], glorot(k, k * f), precision),
        );
        params.insert(&format!("{p}.bias"), ParamKind::Bias, Tensor::zeros(&[f], precision));
        params.insert(
            &format!("{p}.bn.gamma"),
            ParamKind::BnScale,
            Tensor::full(&[f], 1.0, precision),
        );
        params.insert(
            &format!("{p}.bn.beta"),
            ParamKind::BnShift,
            Tensor::zeros(&[f], precision),
        );
        params.insert(
            &format!("{p}.bn.mean"),
            ParamKind::BnRunning,
            Tensor::zeros(&[f], precision),
        );
        params.insert(
            &format!("{p}.bn.var"),
            ParamKind::BnRunning,
            Tensor::full(&[f], 1.0, precision),
        );
    }
    let (m, d) = (cfg.concat_channels(), cfg.depth_multiplier);
    params.insert(
        "encoder.depthwise.kernel",
        ParamKind::ConvKernel,
        uniform(rng, &[k, m, d], glorot(k, k * d), precision),
    );
    let u = cfg.lstm_units;
    let limit = 1.0 / (u as f64).sqrt();
    let mut features = cfg.depthwise_channels();
    for l in 0..cfg.lstm_layers {
        for g in GATES {
            let w = uniform(rng, &[u + features, u], limit, precision);
            params.insert(&format!("encoder.lstm{l}.W_{g}"), ParamKind::RecurrentKernel, w);
        }
        for g in GATES {
            let fill = if g == "f" { 1.0 } else { 0.0 };
            params.insert(
                &format!("encoder.lstm{l}.b_{g}"),
                ParamKind::Bias,
                Tensor::full(&[u], fill, precision),
            );
        }
        features = u;
    }
    let ks = cfg.sep_kernel;
    params.insert(
        "encoder.separable.depthwise",
        ParamKind::ConvKernel,
        uniform(rng, &[ks, u, 1], glorot(ks, ks), precision),
    );
    params.insert(
        "encoder.separable.pointwise",
        ParamKind::ConvKernel,
        uniform(rng, &[u, cfg.sep_channels], glorot(u, cfg.sep_channels), precision),
    );
    Ok(())
}

fn expect_shape(tape: &Tape, v: Var, stage: &str, expected: &[usize]) -> Result<()> {
    if tape.shape(v) != expected {
        return Err(ModelError::Shape {
            stage: stage.to_string(),
            expected: expected.to_vec(),
            got: tape.shape(v).to_vec(),
        });
    }
    Ok(())
}

/// `ELU(BN(W ∗ x + b))` for one block. Returns the batch moments in train
/// mode.
#[allow(clippy::too_many_arguments)]
pub fn conv_block(
    tape: &mut Tape,
    x: Var,
    kernel: Var,
    bias: Var,
    gamma: Var,
    beta: Var,
    mode: &BatchNormMode,
    eps: f64,
) -> Result<(Var, Option<BatchStats>)> {
    let conv = tape.conv_time(x, kernel, Some(bias))?;
    let (bn, stats) = tape.batch_norm(conv, gamma, beta, mode, eps)?;
    Ok((tape.elu(bn, 1.0)?, stats))
}

/// Channel-wise concatenation, blocks in order.
pub fn concat_blocks(tape: &mut Tape, blocks: &[Var]) -> Result<Var> {
    Ok(tape.concat_last(blocks)?)
}

pub fn depthwise_conv(tape: &mut Tape, x: Var, kernel: Var) -> Result<Var> {
    Ok(tape.depthwise_time(x, kernel)?)
}

/// Window-4, stride-4 mean over time; a remainder is dropped.
pub fn avg_pool4(tape: &mut Tape, x: Var) -> Result<Var> {
    Ok(tape.avg_pool_time(x, 4)?)
}

/// Depthwise time conv with multiplier 1, then a 1×1 pointwise mix. The
/// pointwise kernel is `(C, S)`.
pub fn separable_conv(tape: &mut Tape, x: Var, depthwise: Var, pointwise: Var) -> Result<Var> {
    let dw = tape.depthwise_time(x, depthwise)?;
    let shape = tape.shape(dw).to_vec();
    let (rows, c) = (shape[..3].iter().product::<usize>(), shape[3]);
    let flat = tape.reshape(dw, &[rows, c])?;
    let mixed = tape.matmul(flat, pointwise)?;
    let s = tape.shape(pointwise)[1];
    Ok(tape.reshape(mixed, &[shape[0], shape[1], shape[2], s])?)
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `p` and survivors are scaled by `1/(1 − p)`. Identity otherwise.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
    if mode == Mode::Infer || p == 0.0 {
        return Ok(x);
    }
    if !(0.0..1.0).contains(&p) {
        return Err(ModelError::Config(format!("dropout probability {p} outside [0, 1)")));
    }
    let scale = 1.0 / (1.0 - p);
    let n = tape.value(x).numel();
    let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale }).collect();
    let mask = tape.constant(Tensor::from_vec(tape.shape(x), mask)?);
    Ok(tape.mul(x, mask)?)
}

/// Embedding batch plus the batch-norm moments observed in train mode,
/// keyed by the block's parameter prefix.
pub struct EncoderOutput {
    pub embedding: Var,
    pub bn_stats: Vec<(String, BatchStats)>,
}

/// Which LSTM implementation the forward pass records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LstmImpl {
    #[default]
    Fused,
    /// Per-step primitive ops; slow, used to cross-check the fused layer.
    Composed,
}

pub fn lstm_layers(bound: &Bound, cfg: &EncoderConfig) -> Result<Vec<LstmLayer>> {
    (0..cfg.lstm_layers)
        .map(|l| {
            let w = |g: &str| bound.var(&format!("encoder.lstm{l}.W_{g}"));
            let b = |g: &str| bound.var(&format!("encoder.lstm{l}.b_{g}"));
            Ok(LstmLayer {
                w: [w("f")?, w("i")?, w("C")?, w("o")?],
                b: [b("f")?, b("i")?, b("C")?, b("o")?],
            })
        })
        .collect()
}

/// `(N, E, T, 1)` input to `(N, E·S)` embeddings.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    params: &ModelParams,
    bound: &Bound,
    x: Var,
    mode: Mode,
    lstm_impl: LstmImpl,
    rng: &mut impl Rng,
) -> Result<EncoderOutput> {
    cfg.validate()?;
    let n = *tape.shape(x).first().unwrap_or(&0);
    let shapes = cfg.stage_shapes(n);
    let shape_of = |stage: &str| {
        shapes
            .iter()
            .find(|(s, _)| *s == stage)
            .map(|(_, v)| v.clone())
            .expect("known stage")
    };
    expect_shape(tape, x, "input", &shape_of("input"))?;

    let mut blocks = Vec::with_capacity(cfg.block_filters.len());
    let mut bn_stats = Vec::new();
    for i in 0..cfg.block_filters.len() {
        let p = format!("encoder.block{i}");
        let bn_mode = match mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Infer => BatchNormMode::Infer {
                mean: params.get(&format!("{p}.bn.mean"))?.to_vec(),
                var: params.get(&format!("{p}.bn.var"))?.to_vec(),
            },
        };
        let (out, stats) = conv_block(
            tape,
            x,
            bound.var(&format!("{p}.kernel"))?,
            bound.var(&format!("{p}.bias"))?,
            bound.var(&format!("{p}.bn.gamma"))?,
            bound.var(&format!("{p}.bn.beta"))?,
            &bn_mode,
            cfg.bn_epsilon,
        )?;
        if let Some(s) = stats {
            bn_stats.push((p, s));
        }
        blocks.push(out);
    }
    let cat = concat_blocks(tape, &blocks)?;
    expect_shape(tape, cat, "concat", &shape_of("concat"))?;
    let dw = depthwise_conv(tape, cat, bound.var("encoder.depthwise.kernel")?)?;
    expect_shape(tape, dw, "depthwise", &shape_of("depthwise"))?;

    let (e, t) = (cfg.electrodes, cfg.time_len);
    let mut seq = tape.reshape(dw, &[n * e, t, cfg.depthwise_channels()])?;
    let layers = lstm_layers(bound, cfg)?;
    match lstm_impl {
        LstmImpl::Fused => {
            for layer in &layers {
                seq = lstm_layer_fused(tape, seq, layer)?;
            }
        }
        LstmImpl::Composed => seq = lstm_sequence(tape, seq, &layers)?,
    }
    expect_shape(tape, seq, "lstm", &shape_of("lstm"))?;
    let hs = tape.reshape(seq, &[n, e, t, cfg.lstm_units])?;
    let pooled = tape.avg_pool_time(hs, cfg.pool)?;
    expect_shape(tape, pooled, "pool", &shape_of("pool"))?;
    let dropped = dropout(tape, pooled, cfg.dropout_p, mode, rng)?;
    let sep = separable_conv(
        tape,
        dropped,
        bound.var("encoder.separable.depthwise")?,
        bound.var("encoder.separable.pointwise")?,
    )?;
    expect_shape(tape, sep, "separable", &shape_of("separable"))?;
    let averaged = tape.avg_pool_time(sep, cfg.pooled_len())?;
    let embedding = tape.reshape(averaged, &[n, cfg.embedding_dim()])?;
    Ok(EncoderOutput { embedding, bn_stats })
}

/// Folds one batch's moments into the running statistics:
/// `running ← momentum·running + (1 − momentum)·batch`.
pub fn update_running_stats(params: &mut ModelParams, stats: &[(String, BatchStats)], momentum: f64) -> Result<()> {
    for (prefix, s) in stats {
        for (suffix, batch) in [("mean", &s.mean), ("var", &s.var)] {
            let name = format!("{prefix}.bn.{suffix}");
            let old = params.get(&name)?;
            let data = old
                .data()
                .iter()
                .zip(batch)
                .map(|(r, b)| momentum * r + (1.0 - momentum) * b)
                .collect();
            let updated = Tensor::new(old.shape(), data, old.precision())?;
            params.set(&name, updated)?;
        }
    }
    Ok(())
}
