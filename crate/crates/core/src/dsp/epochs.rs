use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{filtfilt, fir_design, stft_denoise, DspError, FilterSpec, Result, StftSpec};
use crate::container;
use crate::ingest::{RawTrial, CHANNELS};
use crate::tensor::{Precision, Tensor};

pub const EPOCH_MAGIC: &[u8; 8] = b"EEGEPOC1";

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub target_len: usize,
    pub filter: FilterSpec,
    pub stft: StftSpec,
    /// Per-channel z-scoring after denoising. Off by default.
    pub zscore: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_len: 384,
            filter: FilterSpec::default(),
            stft: StftSpec::default(),
            zscore: false,
        }
    }
}

/// Truncates at the end or right-pads with zeros.
pub fn fix_length(wave: &[f64], target: usize) -> Vec<f64> {
    let mut out: Vec<f64> = wave.iter().take(target).copied().collect();
    out.resize(target, 0.0);
    out
}

/// The per-channel chain: fix length, band-pass, STFT mask, optional z-score.
pub fn preprocess_channel(wave: &[f64], taps: &[f64], cfg: &PreprocessConfig) -> Result<Vec<f64>> {
    if wave.is_empty() {
        return Err(DspError::Empty);
    }
    let fixed = fix_length(wave, cfg.target_len);
    let filtered = filtfilt(&fixed, taps);
    let mut out = stft_denoise(&filtered, &cfg.stft)?;
    if cfg.zscore {
        let n = out.len() as f64;
        let mean = out.iter().sum::<f64>() / n;
        let sd = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let sd = if sd > 1e-12 { sd } else { 1.0 };
        out.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    Ok(out)
}

/// Preprocessed trials laid out as (N, 5, T, 1), channel order AF3, AF4, T7,
/// T8, Pz.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochTensor {
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
    pub time_len: usize,
    pub sample_rate_hz: f64,
}

#[derive(Serialize, Deserialize)]
struct EpochMeta {
    labels: Vec<usize>,
    channels: Vec<String>,
    sample_rate_hz: f64,
}

impl EpochTensor {
    pub fn n_trials(&self) -> usize {
        self.labels.len()
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n_trials(), CHANNELS.len(), self.time_len, 1]
    }

    pub fn trial(&self, i: usize) -> &[f64] {
        let stride = CHANNELS.len() * self.time_len;
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn channel(&self, trial: usize, channel: usize) -> &[f64] {
        &self.trial(trial)[channel * self.time_len..(channel + 1) * self.time_len]
    }

    /// The trials at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> EpochTensor {
        EpochTensor {
            data: indices.iter().flat_map(|&i| self.trial(i).iter().copied()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            time_len: self.time_len,
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub fn to_tensor(&self, precision: Precision) -> Tensor {
        Tensor::new(&self.shape(), self.data.clone(), precision).expect("epoch data is finite and well shaped")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = EpochMeta {
            labels: self.labels.clone(),
            channels: CHANNELS.iter().map(|c| c.name().to_string()).collect(),
            sample_rate_hz: self.sample_rate_hz,
        };
        let t = self.to_tensor(Precision::Double);
        container::encode(
            EPOCH_MAGIC,
            serde_json::to_value(meta).expect("serializable"),
            &[("epochs", &t)],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<EpochTensor> {
        let (config, arrays) = container::decode(EPOCH_MAGIC, bytes)?;
        let bad = |m: &str| DspError::Container(container::ContainerError::Manifest(m.to_string()));
        let meta: EpochMeta = serde_json::from_value(config).map_err(|e| bad(&e.to_string()))?;
        let (_, t) = arrays
            .into_iter()
            .find(|(n, _)| n == "epochs")
            .ok_or_else(|| bad("no epochs array"))?;
        let shape = t.shape();
        if shape.len() != 4 || shape[0] != meta.labels.len() || shape[1] != CHANNELS.len() || shape[3] != 1 {
            return Err(bad("epochs array has the wrong shape"));
        }
        Ok(EpochTensor {
            time_len: shape[2],
            data: t.to_vec(),
            labels: meta.labels,
            sample_rate_hz: meta.sample_rate_hz,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| DspError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<EpochTensor> {
        let bytes = fs::read(path).map_err(|source| DspError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        EpochTensor::from_bytes(&bytes)
    }
}

/// Runs every channel of every trial through [`preprocess_channel`]. The
/// first failing trial aborts the run, named by its path when known.
pub fn assemble_epochs(trials: &[RawTrial], cfg: &PreprocessConfig) -> Result<EpochTensor> {
    let taps = fir_design(&cfg.filter)?;
    let mut data = Vec::with_capacity(trials.len() * CHANNELS.len() * cfg.target_len);
    let mut labels = Vec::with_capacity(trials.len());
    for (index, trial) in trials.iter().enumerate() {
        let fail = |msg: String| DspError::Trial {
            index,
            path: trial.path.clone(),
            msg,
        };
        labels.push(trial.label.ok_or_else(|| fail("trial has no label".into()))?);
        for ch in CHANNELS {
            let wave = trial.channel(ch).ok_or_else(|| fail(format!("missing channel {ch}")))?;
            let out = preprocess_channel(wave, &taps, cfg).map_err(|e| fail(format!("{ch}: {e}")))?;
            data.extend(out);
        }
    }
    Ok(EpochTensor {
        data,
        labels,
        time_len: cfg.target_len,
        sample_rate_hz: cfg.filter.sample_rate_hz,
    })
}
