//! Preprocessing chain: fixed length, zero-phase FIR band-pass, STFT masking,
//! epoch assembly.

mod epochs;
mod fir;
mod stft;

use std::path::PathBuf;

pub use epochs::{assemble_epochs, fix_length, preprocess_channel, EpochTensor, PreprocessConfig, EPOCH_MAGIC};
pub use fir::{filtfilt, fir_design, frequency_response, FilterSpec};
pub use stft::{istft, stft, stft_denoise, BinMask, Spectrogram, StftSpec};

#[derive(Debug, thiserror::Error)]
pub enum DspError {
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("invalid STFT setup: {0}")]
    InvalidStft(String),
    #[error("signal of {len} samples is shorter than one {window}-sample window")]
    TooShort { len: usize, window: usize },
    #[error("empty waveform")]
    Empty,
    #[error("trial {}: {msg}", path.as_ref().map_or_else(|| format!("#{index}"), |p| p.display().to_string()))]
    Trial {
        index: usize,
        path: Option<PathBuf>,
        msg: String,
    },
    #[error(transparent)]
    Container(#[from] crate::container::ContainerError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, DspError>;
