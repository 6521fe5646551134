use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestEntry, Split};
use super::{format_filename, serialize_trial, IngestError, LabelMap, RawTrial, Result, TrialMeta, CHANNELS};

/// Desk-scale stand-in for the recorded dataset: class `k` is a sinusoid at
/// `base_hz + k·step_hz` on every channel, with a random phase per channel,
/// Gaussian noise and a random DC offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub trials_per_class: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub amplitude: f64,
    pub base_hz: f64,
    pub step_hz: f64,
    pub sample_rate_hz: f64,
    pub n_samples: usize,
    /// DC offsets are drawn from `±dc_range`.
    pub dc_range: f64,
    /// Band edge the class frequencies must stay under.
    pub max_hz: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 2,
            trials_per_class: 50,
            seed: 0,
            noise_sigma: 1.0,
            amplitude: 1.0,
            base_hz: 4.0,
            step_hz: 3.0,
            sample_rate_hz: 128.0,
            n_samples: 384,
            dc_range: 50.0,
            max_hz: 50.0,
        }
    }
}

impl SynthSpec {
    /// Default spec for `n_classes`. The frequency step shrinks below 3 Hz
    /// when needed to keep the top class under 45 Hz.
    pub fn new(n_classes: usize, trials_per_class: usize, seed: u64) -> SynthSpec {
        let d = SynthSpec::default();
        let step_hz = if n_classes > 1 {
            d.step_hz.min((45.0 - d.base_hz) / (n_classes - 1) as f64)
        } else {
            d.step_hz
        };
        SynthSpec {
            n_classes,
            trials_per_class,
            seed,
            step_hz,
            ..d
        }
    }

    pub fn class_frequency(&self, class: usize) -> f64 {
        self.base_hz + self.step_hz * class as f64
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(IngestError::InvalidSpec("n_classes must be at least 2".into()));
        }
        if self.trials_per_class < 1 {
            return Err(IngestError::InvalidSpec("trials_per_class must be at least 1".into()));
        }
        if self.n_samples == 0 || self.sample_rate_hz <= 0.0 || self.noise_sigma < 0.0 {
            return Err(IngestError::InvalidSpec("bad sampling or noise parameters".into()));
        }
        let top = self.class_frequency(self.n_classes - 1);
        if top > self.max_hz {
            return Err(IngestError::InvalidSpec(format!(
                "class {} would sit at {top} Hz, above the {} Hz passband edge",
                self.n_classes - 1,
                self.max_hz
            )));
        }
        Ok(())
    }
}

/// Generates `n_classes × trials_per_class` labelled trials, class-major.
/// The output is a pure function of the spec.
pub fn synth_generate(spec: &SynthSpec, labels: &LabelMap) -> Result<Vec<RawTrial>> {
    spec.validate()?;
    if labels.len() != spec.n_classes {
        return Err(IngestError::InvalidSpec(format!(
            "label map has {} classes, spec asks for {}",
            labels.len(),
            spec.n_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut trials = Vec::with_capacity(spec.n_classes * spec.trials_per_class);
    let mut global = 0u32;
    for class in 0..spec.n_classes {
        let freq = spec.class_frequency(class);
        let synset = labels.primary_synset(class).expect("class within label map");
        for j in 0..spec.trials_per_class {
            let channels = CHANNELS
                .iter()
                .map(|&ch| {
                    let phase = rng.gen_range(0.0..2.0 * PI);
                    let dc = if spec.dc_range > 0.0 {
                        rng.gen_range(-spec.dc_range..spec.dc_range)
                    } else {
                        0.0
                    };
                    let wave = (0..spec.n_samples)
                        .map(|i| {
                            let t = i as f64 / spec.sample_rate_hz;
                            let n = if spec.noise_sigma > 0.0 {
                                noise.sample(&mut rng)
                            } else {
                                0.0
                            };
                            spec.amplitude * (2.0 * PI * freq * t + phase).sin() + n + dc
                        })
                        .collect();
                    (ch, wave)
                })
                .collect();
            global += 1;
            trials.push(RawTrial {
                channels,
                meta: Some(TrialMeta {
                    headset: "Insight".into(),
                    synset_id: synset.to_string(),
                    image_index: j as u64,
                    session: 1 + (j % 3) as u32,
                    global_session: global,
                }),
                label: Some(class),
                path: None,
            });
        }
    }
    Ok(trials)
}

/// Writes each trial under its canonical filename plus `manifest.tsv`.
pub fn write_synthetic_dataset(dir: &Path, spec: &SynthSpec, labels: &LabelMap) -> Result<DatasetManifest> {
    let trials = synth_generate(spec, labels)?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| IngestError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut entries = Vec::with_capacity(trials.len());
    for trial in &trials {
        let meta = trial.meta.as_ref().expect("synthetic trials carry metadata");
        let name = format_filename(meta);
        let path = dir.join(&name);
        fs::write(&path, serialize_trial(trial)).map_err(io(&path))?;
        entries.push(ManifestEntry {
            path: name.into(),
            synset: meta.synset_id.clone(),
            label: trial.label.expect("synthetic trials are labelled"),
            split: Split::Train,
            session: meta.session,
            global_session: meta.global_session,
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = DatasetManifest {
        entries,
        seed: spec.seed,
    };
    let mpath = dir.join("manifest.tsv");
    manifest.save(&mpath)?;
    Ok(manifest)
}
