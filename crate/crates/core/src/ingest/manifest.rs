use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{parse_trial_csv, FilenamePattern, IngestError, LabelMap, RawTrial, Result};

const HEADER: &str = "path\tsynset\tlabel\tsplit\tsession\tglobal_session";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Split, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub synset: String,
    pub label: usize,
    pub split: Split,
    pub session: u32,
    pub global_session: u32,
}

/// Labelled trial list with a train/validation assignment, sorted by path.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn n_classes(&self) -> usize {
        self.entries.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Entries per class for one split.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for e in self.split(split) {
            counts[e.label] += 1;
        }
        counts
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.path.display(),
                e.synset,
                e.label,
                e.split,
                e.session,
                e.global_session
            ));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<DatasetManifest> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim_end_matches('\r') == HEADER => {}
            _ => {
                return Err(IngestError::Manifest {
                    line: 1,
                    msg: format!("expected header {HEADER:?}"),
                })
            }
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            let bad = |msg: String| IngestError::Manifest { line: i + 1, msg };
            let cols: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
            if cols.len() != 6 {
                return Err(bad(format!("expected 6 columns, found {}", cols.len())));
            }
            let num = |s: &str, what: &str| s.parse::<u64>().map_err(|_| bad(format!("bad {what} {s:?}")));
            entries.push(ManifestEntry {
                path: cols[0].into(),
                synset: cols[1].to_string(),
                label: num(cols[2], "label")? as usize,
                split: cols[3].parse().map_err(bad)?,
                session: num(cols[4], "session")? as u32,
                global_session: num(cols[5], "global_session")? as u32,
            });
        }
        Ok(DatasetManifest { entries, seed: 0 })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        DatasetManifest::from_tsv(&text)
    }
}

fn class_rng(seed: u64, class: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Scans `dir` for trial files, labels them through `labels`, and returns
/// the manifest (all entries in the train split) plus the number of files
/// skipped for an unknown synset or a non-matching name.
pub fn build_manifest(dir: &Path, pattern: &FilenamePattern, labels: &LabelMap) -> Result<(DatasetManifest, usize)> {
    let read = fs::read_dir(dir).map_err(|source| IngestError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut names: Vec<String> = read
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    let mut entries = Vec::new();
    let mut skipped = 0;
    for name in names {
        let Ok(meta) = pattern.parse(&name) else {
            skipped += 1;
            continue;
        };
        let Some(label) = labels.label_of(&meta.synset_id) else {
            skipped += 1;
            continue;
        };
        entries.push(ManifestEntry {
            path: name.into(),
            synset: meta.synset_id,
            label,
            split: Split::Train,
            session: meta.session,
            global_session: meta.global_session,
        });
    }
    if skipped > 0 {
        log::warn!(
            "skipped {skipped} files in {} (unmatched name or unknown synset)",
            dir.display()
        );
    }
    Ok((DatasetManifest { entries, seed: 0 }, skipped))
}

/// Reads the trial files for `entries`, resolving relative paths against
/// `base`. Labels and metadata come from the manifest.
pub fn load_trials<'a>(base: &Path, entries: impl IntoIterator<Item = &'a ManifestEntry>) -> Result<Vec<RawTrial>> {
    entries
        .into_iter()
        .map(|e| {
            let path = base.join(&e.path);
            let text = fs::read_to_string(&path).map_err(|source| IngestError::Io {
                path: path.clone(),
                source,
            })?;
            let mut trial = parse_trial_csv(&text).map_err(|source| IngestError::Trial {
                path: path.clone(),
                source: Box::new(source),
            })?;
            trial.label = Some(e.label);
            trial.path = Some(path);
            trial.meta = e
                .path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| FilenamePattern::default().parse(n).ok());
            Ok(trial)
        })
        .collect()
}

fn by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let n = labels.iter().map(|l| l + 1).max().unwrap_or(0);
    let mut out = vec![Vec::new(); n];
    for (i, &l) in labels.iter().enumerate() {
        out[l].push(i);
    }
    out
}

/// Stratified assignment over a label list: each class sends
/// `round(fraction · count)` items (at least one, never all) to validation.
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<Split>> {
    let mut out = vec![Split::Train; labels.len()];
    for (class, mut idx) in by_class(labels).into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(IngestError::TooFewTrials {
                class,
                count: idx.len(),
            });
        }
        let n_val = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        idx.shuffle(&mut class_rng(seed, class));
        for &i in &idx[..n_val] {
            out[i] = Split::Val;
        }
    }
    Ok(out)
}

/// Positions of `k` items per class, in ascending order. The per-class
/// order is a seeded shuffle independent of `k`, so selections for
/// increasing `k` are nested.
pub fn nested_subsample(labels: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut keep = Vec::new();
    for (class, mut idx) in by_class(labels).into_iter().enumerate() {
        if idx.len() < k {
            return Err(IngestError::InsufficientTrials {
                class,
                have: idx.len(),
                need: k,
            });
        }
        idx.shuffle(&mut class_rng(seed.wrapping_add(1), class));
        keep.extend(idx.into_iter().take(k));
    }
    keep.sort_unstable();
    Ok(keep)
}

/// [`stratified_split`] applied to a manifest.
pub fn split_train_val(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    let labels: Vec<usize> = manifest.entries.iter().map(|e| e.label).collect();
    let splits = stratified_split(&labels, fraction, seed)?;
    let mut out = manifest.clone();
    out.seed = seed;
    for (e, s) in out.entries.iter_mut().zip(splits) {
        e.split = s;
    }
    Ok(out)
}

/// Keeps exactly `k` training trials per class (via [`nested_subsample`])
/// and every validation trial.
pub fn subsample_per_class(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<DatasetManifest> {
    let train: Vec<usize> = (0..manifest.entries.len())
        .filter(|&i| manifest.entries[i].split == Split::Train)
        .collect();
    let labels: Vec<usize> = train.iter().map(|&i| manifest.entries[i].label).collect();
    let keep: BTreeSet<usize> = nested_subsample(&labels, k, seed)?
        .into_iter()
        .map(|j| train[j])
        .collect();
    let entries = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(i, e)| e.split == Split::Val || keep.contains(i))
        .map(|(_, e)| e.clone())
        .collect();
    Ok(DatasetManifest {
        entries,
        seed: manifest.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn balanced(classes: usize, per_class: usize) -> DatasetManifest {
        let entries = (0..classes * per_class)
            .map(|i| ManifestEntry {
                path: format!("t{i:05}.csv").into(),
                synset: format!("n{:08}", i % classes),
                label: i % classes,
                split: Split::Train,
                session: 1,
                global_session: i as u32,
            })
            .collect();
        DatasetManifest { entries, seed: 0 }
    }

    #[test]
    fn stratified_split_counts() {
        let s = split_train_val(&balanced(2, 50), 0.2, 11).unwrap();
        assert_eq!(s.class_counts(Split::Val), vec![10, 10]);
        assert_eq!(s.class_counts(Split::Train), vec![40, 40]);
        assert_eq!(s, split_train_val(&balanced(2, 50), 0.2, 11).unwrap());

        let five = split_train_val(&balanced(5, 600), 0.2, 3).unwrap();
        assert_eq!(five.split(Split::Train).count(), 2400);
        assert_eq!(five.split(Split::Val).count(), 600);
    }

    #[test]
    fn split_needs_two_trials_per_class() {
        let mut m = balanced(2, 3);
        m.entries.retain(|e| e.label == 0 || e.global_session == 1);
        assert!(matches!(
            split_train_val(&m, 0.2, 0),
            Err(IngestError::TooFewTrials { class: 1, count: 1 })
        ));
    }

    #[test]
    fn subsample_counts_identity_and_errors() {
        let split = split_train_val(&balanced(2, 63), 0.2, 5).unwrap();
        let sub = subsample_per_class(&split, 10, 9).unwrap();
        assert_eq!(sub.class_counts(Split::Train), vec![10, 10]);
        assert_eq!(sub.class_counts(Split::Val), split.class_counts(Split::Val));
        let full = split.class_counts(Split::Train)[0];
        assert_eq!(subsample_per_class(&split, full, 9).unwrap(), split);
        assert!(matches!(
            subsample_per_class(&split, full + 1, 9),
            Err(IngestError::InsufficientTrials { .. })
        ));
    }

    #[test]
    fn tsv_round_trip() {
        let m = split_train_val(&balanced(3, 4), 0.25, 1).unwrap();
        let back = DatasetManifest::from_tsv(&m.to_tsv()).unwrap();
        assert_eq!(back.entries, m.entries);
        assert!(DatasetManifest::from_tsv("nope\n").is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(classes in 2usize..5, per_class in 2usize..30, seed in any::<u64>(), frac in 0.05f64..0.6) {
            let m = balanced(classes, per_class);
            let s = split_train_val(&m, frac, seed).unwrap();
            prop_assert_eq!(s.entries.len(), m.entries.len());
            let paths: BTreeSet<_> = s.entries.iter().map(|e| e.path.clone()).collect();
            prop_assert_eq!(paths.len(), m.entries.len());
            for c in s.class_counts(Split::Val) {
                let target = frac * per_class as f64;
                prop_assert!((c as f64 - target).abs() <= 1.0);
            }
        }

        #[test]
        fn subsamples_are_nested(seed in any::<u64>()) {
            let split = split_train_val(&balanced(2, 130), 0.2, seed).unwrap();
            let picks = |k| -> BTreeSet<PathBuf> {
                subsample_per_class(&split, k, seed).unwrap()
                    .split(Split::Train).map(|e| e.path.clone()).collect()
            };
            let (a, b, c) = (picks(10), picks(25), picks(50));
            prop_assert!(a.is_subset(&b));
            prop_assert!(b.is_subset(&c));
        }
    }
}
