//! Flat `section.key = value` configuration with `#` comments.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use neurotext::classifier::ClassifierConfig;
use neurotext::dsp::{BinMask, PreprocessConfig};
use neurotext::encoder::EncoderConfig;
use neurotext::model::ModelConfig;
use neurotext::tensor::Precision;
use neurotext::textgen::{BackendKind, BackendSpec, DEFAULT_TEMPLATE};
use neurotext::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("{key}: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Offsets added to the top-level `seed` for each stage.
pub const TRAIN_SEED_OFFSET: u64 = 0;
pub const TEXTGEN_SEED_OFFSET: u64 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset_dir: "data".into(),
            output_dir: "out".into(),
            checkpoint: "out/model.ckpt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextgenConfig {
    pub backend: BackendSpec,
    pub template: String,
    /// Training text for the builtin backend; the bundled sentences if unset.
    pub corpus: Option<PathBuf>,
}

impl Default for TextgenConfig {
    fn default() -> Self {
        TextgenConfig {
            backend: BackendSpec::default(),
            template: DEFAULT_TEMPLATE.to_string(),
            corpus: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Full,
    Desk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub preset: Preset,
    pub seed: Option<u64>,
    pub dsp: PreprocessConfig,
    pub encoder: EncoderConfig,
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    pub textgen: TextgenConfig,
    pub paths: Paths,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            preset: Preset::Full,
            seed: None,
            dsp: PreprocessConfig::default(),
            encoder: EncoderConfig::default(),
            classifier: ClassifierConfig::default(),
            train: TrainConfig::default(),
            textgen: TextgenConfig::default(),
            paths: Paths::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn split_line(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    let k = k.trim();
    let v = v.trim();
    // Quotes keep leading and trailing spaces.
    let v = v.strip_prefix('"').and_then(|q| q.strip_suffix('"')).unwrap_or(v);
    (!k.is_empty()).then_some((k, v))
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = split_line(line).ok_or(ConfigError::Syntax { line: i + 1 })?;
            pairs.push((k.to_string(), v.to_string()));
        }
        let mut cfg = Config::default();
        cfg.apply_all(&pairs)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Config::parse(&text)
    }

    /// Applies `key=value` overrides on top of this configuration.
    pub fn with_overrides(mut self, sets: &[String]) -> Result<Config, ConfigError> {
        let mut pairs = Vec::new();
        for s in sets {
            let (k, v) = split_line(s).ok_or_else(|| ConfigError::Value {
                key: "--set".into(),
                value: s.clone(),
            })?;
            pairs.push((k.to_string(), v.to_string()));
        }
        self.apply_all(&pairs)?;
        Ok(self)
    }

    // The preset goes first and the seed fan-out last, wherever they appear,
    // and a stage seed given explicitly is left alone by the fan-out.
    fn apply_all(&mut self, pairs: &[(String, String)]) -> Result<(), ConfigError> {
        for (k, v) in pairs.iter().filter(|(k, _)| k == "preset") {
            self.preset = match v.as_str() {
                "full" => Preset::Full,
                "desk" => Preset::Desk,
                _ => {
                    return Err(ConfigError::Value {
                        key: k.clone(),
                        value: v.clone(),
                    })
                }
            };
            let n = self.classifier.n_classes;
            let seed = self.train.seed;
            let (model, train) = match self.preset {
                Preset::Full => (ModelConfig::full(n), TrainConfig::default()),
                Preset::Desk => (ModelConfig::desk(n), TrainConfig::desk(seed)),
            };
            self.encoder = model.encoder;
            self.classifier = model.classifier;
            self.train = TrainConfig { seed, ..train };
        }
        let mut explicit = BTreeSet::new();
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            self.set(k, v)?;
            explicit.insert(k.as_str());
        }
        if let Some(seed) = self.seed.filter(|_| explicit.contains("seed")) {
            if !explicit.contains("train.seed") {
                self.train.seed = seed + TRAIN_SEED_OFFSET;
            }
            if !explicit.contains("textgen.seed") {
                self.textgen.backend.seed = seed + TEXTGEN_SEED_OFFSET;
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let k = key;
        match key {
            "seed" => self.seed = Some(parse(k, v)?),
            "dsp.sample_rate_hz" => {
                let fs = parse(k, v)?;
                self.dsp.filter.sample_rate_hz = fs;
                self.dsp.stft.sample_rate_hz = fs;
            }
            "dsp.target_len" => self.dsp.target_len = parse(k, v)?,
            "dsp.passband_low_hz" => self.dsp.filter.passband_low_hz = parse(k, v)?,
            "dsp.passband_high_hz" => self.dsp.filter.passband_high_hz = parse(k, v)?,
            "dsp.tap_count" => self.dsp.filter.tap_count = parse(k, v)?,
            "dsp.stft_window" => self.dsp.stft.window_length = parse(k, v)?,
            "dsp.stft_hop" => self.dsp.stft.hop = parse(k, v)?,
            "dsp.mask_above_hz" => self.dsp.stft.mask = BinMask::ZeroAbove(parse(k, v)?),
            "dsp.zscore" => self.dsp.zscore = parse(k, v)?,
            "encoder.block_filters" => self.encoder.block_filters = parse_list(k, v)?,
            "encoder.kernel_time" => self.encoder.kernel_time = parse(k, v)?,
            "encoder.depth_multiplier" => self.encoder.depth_multiplier = parse(k, v)?,
            "encoder.lstm_units" => self.encoder.lstm_units = parse(k, v)?,
            "encoder.lstm_layers" => self.encoder.lstm_layers = parse(k, v)?,
            "encoder.pool" => self.encoder.pool = parse(k, v)?,
            "encoder.dropout" => self.encoder.dropout_p = parse(k, v)?,
            "encoder.sep_kernel" => self.encoder.sep_kernel = parse(k, v)?,
            "encoder.sep_channels" => self.encoder.sep_channels = parse(k, v)?,
            "encoder.bn_epsilon" => self.encoder.bn_epsilon = parse(k, v)?,
            "encoder.bn_momentum" => self.encoder.bn_momentum = parse(k, v)?,
            "classifier.hidden" => self.classifier.hidden = parse_list(k, v)?,
            "classifier.dropout" => self.classifier.dropout_p = parse(k, v)?,
            "classifier.l2_lambda" => self.classifier.l2_lambda = parse(k, v)?,
            "classifier.maxnorm" => self.classifier.maxnorm_c = parse(k, v)?,
            "classifier.elu_alpha" => self.classifier.elu_alpha = parse(k, v)?,
            "train.lr" => self.train.lr = parse(k, v)?,
            "train.beta1" => self.train.beta1 = parse(k, v)?,
            "train.beta2" => self.train.beta2 = parse(k, v)?,
            "train.adam_eps" => self.train.adam_eps = parse(k, v)?,
            "train.batch_size" => self.train.batch_size = parse(k, v)?,
            "train.epochs" => self.train.epochs = parse(k, v)?,
            "train.decay_rate" => self.train.decay_rate = parse(k, v)?,
            "train.patience" => self.train.patience = parse(k, v)?,
            "train.val_fraction" => self.train.val_fraction = parse(k, v)?,
            "train.seed" => self.train.seed = parse(k, v)?,
            "train.precision" => {
                self.train.precision = match v {
                    "f32" => Precision::Single,
                    "f64" => Precision::Double,
                    _ => {
                        return Err(ConfigError::Value {
                            key: k.into(),
                            value: v.into(),
                        })
                    }
                }
            }
            "textgen.backend" => {
                self.textgen.backend.kind = v.parse::<BackendKind>().map_err(|_| ConfigError::Value {
                    key: k.into(),
                    value: v.into(),
                })?
            }
            "textgen.url" => self.textgen.backend.url = (!v.is_empty()).then(|| v.to_string()),
            "textgen.token" => self.textgen.backend.token = (!v.is_empty()).then(|| v.to_string()),
            "textgen.model" => self.textgen.backend.model = v.to_string(),
            "textgen.timeout_s" => self.textgen.backend.timeout_s = parse(k, v)?,
            "textgen.max_tokens" => self.textgen.backend.max_tokens = parse(k, v)?,
            "textgen.temperature" => self.textgen.backend.temperature = parse(k, v)?,
            "textgen.seed" => self.textgen.backend.seed = parse(k, v)?,
            "textgen.order" => self.textgen.backend.order = parse(k, v)?,
            "textgen.smoothing" => self.textgen.backend.smoothing = parse(k, v)?,
            "textgen.max_concurrent" => self.textgen.backend.max_concurrent = parse(k, v)?,
            "textgen.template" => self.textgen.template = v.to_string(),
            "textgen.corpus" => self.textgen.corpus = (!v.is_empty()).then(|| v.into()),
            "paths.dataset_dir" => self.paths.dataset_dir = v.into(),
            "paths.output_dir" => self.paths.output_dir = v.into(),
            "paths.checkpoint" => self.paths.checkpoint = v.into(),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Model configuration for `n_classes` and epochs of `time_len` samples.
    pub fn model(&self, n_classes: usize, time_len: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                time_len,
                ..self.encoder.clone()
            },
            classifier: ClassifierConfig {
                n_classes,
                ..self.classifier.clone()
            },
        }
    }

    /// Every key with its current value, in a form [`Config::parse`] reads
    /// back.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv(
            "preset",
            if self.preset == Preset::Desk { "desk" } else { "full" }.into(),
        );
        if let Some(s) = self.seed {
            kv("seed", s.to_string());
        }
        let d = &self.dsp;
        kv("dsp.sample_rate_hz", d.filter.sample_rate_hz.to_string());
        kv("dsp.target_len", d.target_len.to_string());
        kv("dsp.passband_low_hz", d.filter.passband_low_hz.to_string());
        kv("dsp.passband_high_hz", d.filter.passband_high_hz.to_string());
        kv("dsp.tap_count", d.filter.tap_count.to_string());
        kv("dsp.stft_window", d.stft.window_length.to_string());
        kv("dsp.stft_hop", d.stft.hop.to_string());
        if let BinMask::ZeroAbove(f) = d.stft.mask {
            kv("dsp.mask_above_hz", f.to_string());
        }
        kv("dsp.zscore", d.zscore.to_string());
        let e = &self.encoder;
        kv("encoder.block_filters", join(&e.block_filters));
        kv("encoder.kernel_time", e.kernel_time.to_string());
        kv("encoder.depth_multiplier", e.depth_multiplier.to_string());
        kv("encoder.lstm_units", e.lstm_units.to_string());
        kv("encoder.lstm_layers", e.lstm_layers.to_string());
        kv("encoder.pool", e.pool.to_string());
        kv("encoder.dropout", e.dropout_p.to_string());
        kv("encoder.sep_kernel", e.sep_kernel.to_string());
        kv("encoder.sep_channels", e.sep_channels.to_string());
        kv("encoder.bn_epsilon", e.bn_epsilon.to_string());
        kv("encoder.bn_momentum", e.bn_momentum.to_string());
        let c = &self.classifier;
        kv("classifier.hidden", join(&c.hidden));
        kv("classifier.dropout", c.dropout_p.to_string());
        kv("classifier.l2_lambda", c.l2_lambda.to_string());
        kv("classifier.maxnorm", c.maxnorm_c.to_string());
        kv("classifier.elu_alpha", c.elu_alpha.to_string());
        let t = &self.train;
        kv("train.lr", t.lr.to_string());
        kv("train.beta1", t.beta1.to_string());
        kv("train.beta2", t.beta2.to_string());
        kv("train.adam_eps", t.adam_eps.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.decay_rate", t.decay_rate.to_string());
        kv("train.patience", t.patience.to_string());
        kv("train.val_fraction", t.val_fraction.to_string());
        kv("train.seed", t.seed.to_string());
        kv(
            "train.precision",
            if t.precision == Precision::Single { "f32" } else { "f64" }.into(),
        );
        let b = &self.textgen.backend;
        let kind = match b.kind {
            BackendKind::BuiltinNgram => "builtin",
            BackendKind::Uniform => "uniform",
            BackendKind::Remote => "remote",
        };
        kv("textgen.backend", kind.into());
        kv("textgen.url", b.url.clone().unwrap_or_default());
        kv("textgen.token", b.token.clone().unwrap_or_default());
        kv("textgen.model", b.model.clone());
        kv("textgen.timeout_s", b.timeout_s.to_string());
        kv("textgen.max_tokens", b.max_tokens.to_string());
        kv("textgen.temperature", b.temperature.to_string());
        kv("textgen.seed", b.seed.to_string());
        kv("textgen.order", b.order.to_string());
        kv("textgen.smoothing", b.smoothing.to_string());
        kv("textgen.max_concurrent", b.max_concurrent.to_string());
        kv(
            "textgen.corpus",
            self.textgen
                .corpus
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("paths.dataset_dir", self.paths.dataset_dir.display().to_string());
        kv("paths.output_dir", self.paths.output_dir.display().to_string());
        kv("paths.checkpoint", self.paths.checkpoint.display().to_string());
        kv("textgen.template", format!("\"{}\"", self.textgen.template));
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines() {
        let cfg = Config::parse("# header\n\ntrain.lr = 0.01  \n  # indented\n").unwrap();
        assert_eq!(cfg.train.lr, 0.01);
    }

    #[test]
    fn unknown_and_malformed() {
        assert!(matches!(
            Config::parse("train.lr_max = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            Config::parse("train.lr 1"),
            Err(ConfigError::Syntax { line: 1 })
        ));
        assert!(matches!(
            Config::parse("train.epochs = ten"),
            Err(ConfigError::Value { .. })
        ));
    }
}
