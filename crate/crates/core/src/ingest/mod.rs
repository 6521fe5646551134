//! Trial files, filename metadata, label tables, synthetic data and
//! train/validation manifests.

mod filename;
mod labels;
mod manifest;
mod synth;
mod trial;

use std::path::PathBuf;

pub use filename::{format_filename, FilenamePattern, TrialMeta, DEFAULT_FILENAME_PATTERN};
pub use labels::LabelMap;
pub use manifest::{
    build_manifest, load_trials, nested_subsample, split_train_val, stratified_split, subsample_per_class,
    DatasetManifest, ManifestEntry, Split,
};
pub use synth::{synth_generate, write_synthetic_dataset, SynthSpec};
pub use trial::{parse_trial_csv, serialize_trial, Channel, RawTrial, CHANNELS};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty trial file")]
    EmptyInput,
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
    #[error("channel {0} appears twice")]
    DuplicateChannel(String),
    #[error("channel {0} has no samples")]
    EmptyWaveform(String),
    #[error("line {line}, column {column}: {value:?} is not a number")]
    NonNumeric { line: usize, column: usize, value: String },
    #[error("missing channels: {0:?}")]
    MissingChannels(Vec<String>),
    #[error("invalid filename pattern: {0}")]
    InvalidPattern(String),
    #[error("filename pattern lacks the {0:?} capture group")]
    MissingGroup(&'static str),
    #[error("{0:?} does not match the filename pattern")]
    NoMatch(String),
    #[error("field {field} of {name:?} is not an integer: {value:?}")]
    BadInteger {
        name: String,
        field: &'static str,
        value: String,
    },
    #[error("class {class} has {count} trials; at least 2 are needed to split")]
    TooFewTrials { class: usize, count: usize },
    #[error("class {class} has {have} training trials, {need} requested")]
    InsufficientTrials { class: usize, have: usize, need: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("{path}: {source}")]
    Trial {
        path: PathBuf,
        #[source]
        source: Box<IngestError>,
    },
}

pub type Result<T> = std::result::Result<T, IngestError>;
