use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use neurotext::dsp::{assemble_epochs, EpochTensor};
use neurotext::ingest::{
    load_trials, write_synthetic_dataset, DatasetManifest, LabelMap, RawTrial, SynthSpec, CHANNELS,
};
use neurotext::model::Model;
use neurotext::textgen::{
    generate_for_trials, ppl_csv, ppl_row, Backend, BackendKind, BackendSpec, GenerationResult, PromptTemplate,
    DEFAULT_CORPUS,
};
use neurotext::trainer::{evaluate, fit, load_checkpoint, split_epochs, sweep_data_efficiency, Checkpoint, Evaluation};

use crate::config::Config;
use crate::{read_file, sibling, write_file, CliError};

/// Environment variable consulted for the remote backend's bearer token
/// when the configuration has none.
pub const TOKEN_ENV: &str = "NEUROTEXT_API_TOKEN";

#[derive(Debug, Parser)]
#[command(
    name = "neurotext",
    version,
    about = "EEG trial classification and class-conditioned text generation"
)]
pub struct Cli {
    /// Configuration file of `section.key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset: one CSV per trial plus manifest.tsv.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        /// Defaults to the configured seed, else 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter, denoise and stack the trials of a manifest into an epoch file.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write each trial's processed channels as `<trial>.filtered.csv`
        /// next to the output.
        #[arg(long)]
        debug: bool,
    },
    /// Train on an epoch file; writes the best checkpoint and per-epoch metrics.
    Train {
        #[arg(long)]
        epochs: PathBuf,
        /// Defaults to `paths.checkpoint`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Accuracy of a checkpoint on an epoch file, plus a confusion matrix
    /// written beside the report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        epochs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy against training trials per class.
    Sweep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,25,50,100")]
        k: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify each trial and complete its prompt; one JSON object per line.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        epochs: PathBuf,
        /// builtin, uniform or remote; defaults to `textgen.backend`.
        #[arg(long)]
        backend: Option<BackendKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perplexity table with one row per class count, from saved generations
    /// or from checkpoint and epoch file pairs.
    Ppl {
        #[arg(long, conflicts_with_all = ["ckpt", "epochs"])]
        generations: Vec<PathBuf>,
        #[arg(long, requires = "epochs")]
        ckpt: Vec<PathBuf>,
        #[arg(long, requires = "ckpt")]
        epochs: Vec<PathBuf>,
        #[arg(long)]
        backend: Option<BackendKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved configuration.
    Config,
}

fn load_config(cli: &Cli) -> Result<Config, CliError> {
    let base = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    Ok(base.with_overrides(&cli.set)?)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth {
            classes,
            per_class,
            seed,
            noise,
            ref out,
        } => synth(classes, per_class, seed.or(cfg.seed).unwrap_or(0), noise, out),
        Command::Preprocess {
            ref manifest,
            ref out,
            debug,
        } => preprocess(&cfg, manifest, out, debug),
        Command::Train {
            ref epochs,
            ref out,
            ref metrics,
        } => train(&cfg, epochs, out.as_deref().unwrap_or(&cfg.paths.checkpoint), metrics),
        Command::Eval {
            ref ckpt,
            ref epochs,
            ref out,
        } => eval(&cfg, ckpt, epochs, out).map(|_| ()),
        Command::Sweep {
            ref manifest,
            ref k,
            ref out,
        } => sweep(&cfg, manifest, k, out),
        Command::Generate {
            ref ckpt,
            ref epochs,
            backend,
            ref out,
        } => generate(&cfg, ckpt, epochs, backend, out),
        Command::Ppl {
            ref generations,
            ref ckpt,
            ref epochs,
            backend,
            ref out,
        } => ppl(&cfg, generations, ckpt, epochs, backend, out),
        Command::Config => {
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

pub fn synth(classes: usize, per_class: usize, seed: u64, noise: f64, out: &Path) -> Result<(), CliError> {
    let labels = LabelMap::for_task(classes)?;
    let spec = SynthSpec {
        noise_sigma: noise,
        ..SynthSpec::new(classes, per_class, seed)
    };
    let manifest = write_synthetic_dataset(out, &spec, &labels)?;
    println!(
        "wrote {} trials and manifest.tsv to {}",
        manifest.entries.len(),
        out.display()
    );
    Ok(())
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

pub fn load_manifest_epochs(cfg: &Config, manifest: &Path) -> Result<(Vec<RawTrial>, EpochTensor), CliError> {
    let m = DatasetManifest::load(manifest)?;
    if m.entries.is_empty() {
        return Err(CliError::usage(format!(
            "{}: manifest lists no trials",
            manifest.display()
        )));
    }
    let trials = load_trials(base_dir(manifest), &m.entries)?;
    let epochs = assemble_epochs(&trials, &cfg.dsp)?;
    Ok((trials, epochs))
}

pub fn preprocess(cfg: &Config, manifest: &Path, out: &Path, debug: bool) -> Result<(), CliError> {
    let (trials, epochs) = load_manifest_epochs(cfg, manifest)?;
    write_file(out, epochs.to_bytes())?;
    if debug {
        for (i, trial) in trials.iter().enumerate() {
            let stem = trial
                .path
                .as_ref()
                .and_then(|p| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("trial{i}"));
            let filtered = RawTrial {
                channels: CHANNELS
                    .iter()
                    .enumerate()
                    .map(|(c, &ch)| (ch, epochs.channel(i, c).to_vec()))
                    .collect(),
                ..RawTrial::default()
            };
            let path = base_dir(out).join(format!("{stem}.filtered.csv"));
            write_file(&path, neurotext::ingest::serialize_trial(&filtered))?;
        }
    }
    println!("wrote epochs of shape {:?} to {}", epochs.shape(), out.display());
    Ok(())
}

fn load_epochs(path: &Path) -> Result<EpochTensor, CliError> {
    Ok(EpochTensor::load(path)?)
}

fn n_classes_of(epochs: &EpochTensor) -> Result<usize, CliError> {
    let n = epochs.labels.iter().max().map_or(0, |m| m + 1);
    if n < 2 {
        return Err(CliError::usage("training needs labels from at least two classes"));
    }
    Ok(n)
}

pub fn train(cfg: &Config, epochs: &Path, out: &Path, metrics: &Path) -> Result<(), CliError> {
    let data = load_epochs(epochs)?;
    let model_cfg = cfg.model(n_classes_of(&data)?, data.time_len);
    let (train, val) = split_epochs(&data, cfg.train.val_fraction, cfg.train.seed)?;
    let outcome = fit(&model_cfg, &cfg.train, &train, &val)?;
    write_file(out, outcome.checkpoint.to_bytes())?;
    write_file(metrics, outcome.metrics.to_csv())?;
    println!(
        "best epoch {} (val loss {:.4}) of {}; checkpoint {}",
        outcome.checkpoint.epoch,
        outcome.checkpoint.best_val_loss,
        outcome.metrics.rows.len(),
        out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(load_checkpoint(path)?)
}

/// Writes `classes,accuracy` to `out` and the confusion matrix (rows are
/// true classes) to `out.confusion.csv`.
pub fn eval(cfg: &Config, ckpt: &Path, epochs: &Path, out: &Path) -> Result<Evaluation, CliError> {
    let ck = load_model(ckpt)?;
    let data = load_epochs(epochs)?;
    let e = evaluate(&ck.model, &data, cfg.train.batch_size)?;
    write_file(out, format!("classes,accuracy\n{},{:?}\n", e.n_classes, e.accuracy))?;
    let mut conf = String::from("true");
    for c in 0..e.n_classes {
        let _ = write!(conf, ",pred_{c}");
    }
    conf.push('\n');
    for (c, row) in e.confusion.iter().enumerate() {
        let _ = write!(conf, "{c}");
        for v in row {
            let _ = write!(conf, ",{v}");
        }
        conf.push('\n');
    }
    write_file(&sibling(out, "confusion"), conf)?;
    println!(
        "{} classes: accuracy {:.4} on {} trials",
        e.n_classes,
        e.accuracy,
        data.n_trials()
    );
    Ok(e)
}

/// Holds out `train.val_fraction` of every class as a fixed validation set,
/// then trains on nested subsets of `k` trials per class from the rest.
pub fn sweep(cfg: &Config, manifest: &Path, ks: &[usize], out: &Path) -> Result<(), CliError> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::usage("--k needs positive sample counts"));
    }
    let (_, data) = load_manifest_epochs(cfg, manifest)?;
    let model_cfg = cfg.model(n_classes_of(&data)?, data.time_len);
    let (pool, val) = split_epochs(&data, cfg.train.val_fraction, cfg.train.seed)?;
    let rows = sweep_data_efficiency(&pool, &val, ks, &model_cfg, &cfg.train)?;
    let mut csv = String::from("samples_per_class,n_train,accuracy,val_loss\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{:?},{:?}", r.k, r.n_train, r.accuracy, r.val_loss);
    }
    write_file(out, csv)?;
    println!("wrote {} sweep rows to {}", rows.len(), out.display());
    Ok(())
}

fn backend_spec(cfg: &Config, kind: Option<BackendKind>) -> BackendSpec {
    let mut spec = cfg.textgen.backend.clone();
    if let Some(kind) = kind {
        spec.kind = kind;
    }
    if spec.token.is_none() {
        spec.token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
    }
    spec
}

fn build_backend(cfg: &Config, spec: &BackendSpec) -> Result<Backend, CliError> {
    let corpus = match &cfg.textgen.corpus {
        Some(path) => read_file(path)?,
        None => DEFAULT_CORPUS.to_string(),
    };
    Ok(Backend::from_spec(spec, Some(&corpus))?)
}

fn generations_for(
    cfg: &Config,
    backend: &Backend,
    spec: &BackendSpec,
    ckpt: &Path,
    epochs: &Path,
) -> Result<Vec<GenerationResult>, CliError> {
    let model: Model = load_model(ckpt)?.model;
    let data = load_epochs(epochs)?;
    let labels = LabelMap::for_task(model.n_classes())?;
    let template = PromptTemplate::new(&cfg.textgen.template)?;
    Ok(generate_for_trials(&model, &data, &labels, &template, backend, spec)?)
}

pub fn generate(
    cfg: &Config,
    ckpt: &Path,
    epochs: &Path,
    kind: Option<BackendKind>,
    out: &Path,
) -> Result<(), CliError> {
    let spec = backend_spec(cfg, kind);
    let backend = build_backend(cfg, &spec)?;
    let results = generations_for(cfg, &backend, &spec, ckpt, epochs)?;
    let mut jsonl = String::new();
    for r in &results {
        jsonl.push_str(&serde_json::to_string(r).expect("generation results serialize"));
        jsonl.push('\n');
    }
    write_file(out, jsonl)?;
    println!("wrote {} generations to {}", results.len(), out.display());
    Ok(())
}

fn read_generations(path: &Path) -> Result<Vec<GenerationResult>, CliError> {
    read_file(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::new(crate::ExitKind::Io, format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Groups generations by the classifier's class count and writes one
/// perplexity row per count, ascending.
pub fn ppl(
    cfg: &Config,
    generations: &[PathBuf],
    ckpts: &[PathBuf],
    epochs: &[PathBuf],
    kind: Option<BackendKind>,
    out: &Path,
) -> Result<(), CliError> {
    let mut all = Vec::new();
    if !generations.is_empty() {
        for path in generations {
            all.extend(read_generations(path)?);
        }
    } else {
        if ckpts.is_empty() || ckpts.len() != epochs.len() {
            return Err(CliError::usage(
                "give --generations, or matching --ckpt and --epochs lists",
            ));
        }
        let spec = backend_spec(cfg, kind);
        let backend = build_backend(cfg, &spec)?;
        for (c, e) in ckpts.iter().zip(epochs) {
            all.extend(generations_for(cfg, &backend, &spec, c, e)?);
        }
    }
    let mut groups: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for g in all {
        if !g.logprobs_available {
            return Err(neurotext::textgen::TextgenError::NoLogprobs(g.backend).into());
        }
        groups.entry(g.class_probs.len()).or_default().push(g.logprobs);
    }
    if groups.is_empty() {
        return Err(CliError::usage("no generations to score"));
    }
    let rows = groups
        .iter()
        .map(|(&n, seqs)| ppl_row(n, seqs))
        .collect::<Result<Vec<_>, _>>()?;
    write_file(out, ppl_csv(&rows))?;
    for r in &rows {
        println!(
            "{:>3} classes: PPL {:.2}, BPC {:.3} over {} sequences",
            r.n_classes, r.mean_ppl, r.mean_bpc, r.n_sequences
        );
    }
    Ok(())
}
