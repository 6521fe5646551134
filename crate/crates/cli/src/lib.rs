//! Subcommands behind the `neurotext` executable. Each one reads its inputs
//! from files, writes its outputs to files, and maps failures onto the exit
//! codes 1 (I/O), 2 (arguments or configuration) and 3 (numerical).

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use neurotext::container::ContainerError;
use neurotext::dsp::DspError;
use neurotext::ingest::IngestError;
use neurotext::params::ModelError;
use neurotext::tensor::TensorError;
use neurotext::textgen::TextgenError;
use neurotext::trainer::TrainError;

pub use commands::{run, Cli, Command};
pub use config::{Config, ConfigError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Io = 1,
    Usage = 2,
    Numeric = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> CliError {
        CliError {
            kind,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> CliError {
        CliError::new(ExitKind::Usage, message)
    }

    pub fn io(path: &Path, err: std::io::Error) -> CliError {
        CliError::new(ExitKind::Io, format!("{}: {err}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn kind_of_tensor(e: &TensorError) -> ExitKind {
    match e {
        TensorError::NonFinite { .. } | TensorError::Domain { .. } => ExitKind::Numeric,
        _ => ExitKind::Usage,
    }
}

fn kind_of_model(e: &ModelError) -> ExitKind {
    match e {
        ModelError::Tensor(t) => kind_of_tensor(t),
        _ => ExitKind::Usage,
    }
}

fn kind_of_ingest(e: &IngestError) -> ExitKind {
    match e {
        IngestError::InvalidSpec(_)
        | IngestError::InvalidPattern(_)
        | IngestError::MissingGroup(_)
        | IngestError::TooFewTrials { .. }
        | IngestError::InsufficientTrials { .. } => ExitKind::Usage,
        _ => ExitKind::Io,
    }
}

macro_rules! classify {
    ($ty:ty, $f:expr) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> CliError {
                let kind: ExitKind = $f(&e);
                CliError::new(kind, e.to_string())
            }
        }
    };
}

classify!(ConfigError, |e: &ConfigError| match e {
    ConfigError::Io { .. } => ExitKind::Io,
    _ => ExitKind::Usage,
});
classify!(ContainerError, |_: &ContainerError| ExitKind::Io);
classify!(ModelError, kind_of_model);
classify!(IngestError, kind_of_ingest);
classify!(DspError, |e: &DspError| match e {
    DspError::InvalidFilter(_) | DspError::InvalidStft(_) => ExitKind::Usage,
    _ => ExitKind::Io,
});
classify!(TrainError, |e: &TrainError| match e {
    TrainError::NonFinite { .. } => ExitKind::Numeric,
    TrainError::Model(m) => kind_of_model(m),
    TrainError::Ingest(i) => kind_of_ingest(i),
    TrainError::Container(_) | TrainError::Checkpoint(_) | TrainError::Io { .. } => ExitKind::Io,
    TrainError::EmptySplit(_) | TrainError::Config(_) | TrainError::LabelMismatch { .. } => ExitKind::Usage,
});
classify!(TextgenError, |e: &TextgenError| match e {
    TextgenError::Transport { .. } | TextgenError::Status { .. } | TextgenError::Response { .. } => ExitKind::Io,
    TextgenError::EmptySequence | TextgenError::PositiveLogprob(_) | TextgenError::PerplexityBelowOne(_) => {
        ExitKind::Numeric
    }
    TextgenError::Model(m) => kind_of_model(m),
    _ => ExitKind::Usage,
});

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// `out.csv` becomes `out.<suffix>.csv`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = path
        .extension()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    path.with_file_name(format!("{stem}.{suffix}.{ext}"))
}
