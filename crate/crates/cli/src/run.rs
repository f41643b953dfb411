//! Run directories: corpus caches, training with periodic probes, and
//! re-probing of saved checkpoints.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.snapshot          resolved experiment config (TOML)
//! corpus/train.tlcx        training split cache
//! corpus/dev.tlcx          held-out split cache
//! corpus/manifest.json     corpus key, sizes and SHA-256 digests
//! checkpoints/step-<n>.ckpt
//! probes/step-<n>.json     probe reports of stage n (dev, optional dev_beam, train)
//! trajectory.csv           step,phase,metric,split,value
//! manifest.json            run summary with file digests
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trunclab_core::corpus::{encode_cache, read_cache, synthesize_split, Example, Vocabulary};
use trunclab_core::metrics::{run_probe, write_rows, MetricRecord, ProbeReport, CSV_HEADER};
use trunclab_core::model::{DecodeConfig, Seq2SeqModel};
use trunclab_core::trainer::{warm_start, Checkpoint, Trainer};

use crate::config::{hex, ConfigError, ExperimentConfig, Resolved};

pub const SNAPSHOT: &str = "config.snapshot";
pub const TRAJECTORY: &str = "trajectory.csv";

pub struct Corpus {
    pub train: Arc<Vec<Example>>,
    pub dev: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub file: String,
    pub examples: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    /// Digest of the settings that determine the corpus bytes.
    pub key: String,
    pub seed: u64,
    pub train: SplitInfo,
    pub dev: SplitInfo,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn corpus_key(r: &Resolved) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        vocab: &'a trunclab_core::corpus::VocabConfig,
        synth: &'a trunclab_core::corpus::SynthConfig,
        dev_examples: usize,
    }
    let text = toml::to_string(&Key {
        vocab: &r.config.vocab,
        synth: &r.synth,
        dev_examples: r.config.data.dev_examples,
    })
    .expect("corpus key serializes");
    sha256_hex(text.as_bytes())
}

pub fn synthesize(r: &Resolved) -> Result<Corpus> {
    if r.config.data.ingest.is_some() {
        return Err(ConfigError(
            "`data.ingest` corpora carry no provenance labels and are analysis-only; use `analyze`".into(),
        )
        .into());
    }
    let train = synthesize_split(&r.vocab, &r.synth, 0, r.synth.n_examples)?;
    let dev = synthesize_split(&r.vocab, &r.synth, 1, r.config.data.dev_examples)?;
    Ok(Corpus {
        train: Arc::new(train),
        dev,
    })
}

/// Writes both split caches and the corpus manifest under `dir/corpus`.
pub fn write_corpus(dir: &Path, r: &Resolved, corpus: &Corpus) -> Result<CorpusManifest> {
    let cdir = dir.join("corpus");
    fs::create_dir_all(&cdir).with_context(|| format!("creating {}", cdir.display()))?;
    let mut info = Vec::new();
    for (name, examples) in [("train.tlcx", corpus.train.as_slice()), ("dev.tlcx", &corpus.dev)] {
        let bytes = encode_cache(examples);
        fs::write(cdir.join(name), &bytes)?;
        info.push(SplitInfo {
            file: name.into(),
            examples: examples.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let dev = info.pop().expect("two splits");
    let train = info.pop().expect("two splits");
    let manifest = CorpusManifest {
        key: corpus_key(r),
        seed: r.synth.seed,
        train,
        dev,
    };
    write_json(&cdir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reuses the cached corpus when it was written for the same settings,
/// otherwise synthesizes and caches it.
pub fn load_or_synthesize(dir: &Path, r: &Resolved) -> Result<(Corpus, CorpusManifest)> {
    let cdir = dir.join("corpus");
    if let Ok(text) = fs::read_to_string(cdir.join("manifest.json")) {
        let m: CorpusManifest = serde_json::from_str(&text).context("corpus/manifest.json")?;
        if m.key == corpus_key(r) {
            let train = read_cache(&cdir.join(&m.train.file))?;
            let dev = read_cache(&cdir.join(&m.dev.file))?;
            if train.len() != m.train.examples || dev.len() != m.dev.examples {
                bail!("corpus cache sizes disagree with corpus/manifest.json");
            }
            return Ok((
                Corpus {
                    train: Arc::new(train),
                    dev,
                },
                m,
            ));
        }
    }
    let corpus = synthesize(r)?;
    let m = write_corpus(dir, r, &corpus)?;
    Ok((corpus, m))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Probes run at every stage: generation and reference probabilities on the
/// dev probe set, and reference probabilities on a fixed training sample.
pub struct ProbeSuite<'a> {
    pub vocab: &'a Vocabulary,
    pub dev: &'a [Example],
    pub train_sample: &'a [Example],
    pub decode: DecodeConfig,
    pub beam: Option<DecodeConfig>,
}

impl<'a> ProbeSuite<'a> {
    pub fn new(r: &'a Resolved, corpus: &'a Corpus) -> Self {
        let n_train = r.config.probe.train_sample.min(corpus.train.len());
        Self {
            vocab: &r.vocab,
            dev: &corpus.dev[..r.config.probe.size],
            train_sample: &corpus.train[..n_train],
            decode: r.decode.clone(),
            beam: r.beam.clone(),
        }
    }

    pub fn run(&self, model: &Seq2SeqModel, step: u64) -> Result<Vec<ProbeReport>> {
        let mut out = vec![run_probe(model, self.dev, Some(&self.decode), self.vocab, step, "dev")?];
        if let Some(beam) = &self.beam {
            out.push(run_probe(model, self.dev, Some(beam), self.vocab, step, "dev_beam")?);
        }
        if !self.train_sample.is_empty() {
            out.push(run_probe(model, self.train_sample, None, self.vocab, step, "train")?);
        }
        Ok(out)
    }
}

pub fn records_of(reports: &[ProbeReport]) -> Vec<MetricRecord> {
    reports.iter().flat_map(ProbeReport::records).collect()
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step-{step}.ckpt"))
}

pub fn probe_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("probes").join(format!("step-{step}.json"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub step: u64,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub seed: u64,
    pub config_sha256: String,
    pub corpus: CorpusManifest,
    pub total_steps: u64,
    pub probe_steps: Vec<u64>,
    pub probe_examples: usize,
    pub checkpoints: Vec<FileDigest>,
    pub trajectory_sha256: String,
}

/// Loads the resolved config recorded in a run directory.
pub fn load_snapshot(dir: &Path) -> Result<Resolved> {
    let path = dir.join(SNAPSHOT);
    let text = fs::read_to_string(&path)
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_toml(&text)?.resolve()
}

/// Trains one run into `dir`, probing at every checkpoint step. `progress`
/// receives one line per probe stage.
pub fn train_run(r: &Resolved, dir: &Path, mut progress: impl FnMut(&str)) -> Result<RunManifest> {
    if dir.join(TRAJECTORY).exists() {
        return Err(ConfigError(format!(
            "{} already holds a trajectory; choose a fresh --out",
            dir.display()
        ))
        .into());
    }
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::create_dir_all(dir.join("probes"))?;
    let snapshot = r.config.to_toml();
    fs::write(dir.join(SNAPSHOT), &snapshot)?;
    let (corpus, corpus_manifest) = load_or_synthesize(dir, r)?;
    let suite = ProbeSuite::new(r, &corpus);

    let model = Seq2SeqModel::new(r.model.clone())?;
    let mut trainer = Trainer::new(model, corpus.train.clone(), r.train.clone())?;
    let traj_path = dir.join(TRAJECTORY);
    let mut traj = BufWriter::new(File::create(&traj_path)?);
    writeln!(traj, "{CSV_HEADER}")?;
    let mut checkpoints = Vec::new();
    let mut probe_steps = Vec::new();
    while !trainer.is_done() {
        let rec = trainer.train_step()?;
        write_rows(&mut traj, &rec.records())?;
        let step = trainer.step();
        if !r.train.is_checkpoint_step(step) {
            continue;
        }
        let ckpt = trainer.checkpoint();
        let bytes = ckpt.to_bytes();
        let path = checkpoint_path(dir, step);
        fs::write(&path, &bytes)?;
        checkpoints.push(FileDigest {
            step,
            file: format!("checkpoints/step-{step}.ckpt"),
            sha256: sha256_hex(&bytes),
        });
        let reports = suite.run(trainer.model(), step)?;
        write_json(&probe_path(dir, step), &reports)?;
        write_rows(&mut traj, &records_of(&reports))?;
        traj.flush()?;
        probe_steps.push(step);
        let a = &reports[0].aggregates;
        progress(&format!(
            "step {step:>6}  loss {:.4}  overlap_2 {:.3}  rouge_1 {:.3}  ser {:.3}  masked {:.3}",
            rec.loss,
            a.overlap[1].unwrap_or(f64::NAN),
            a.rouge1.unwrap_or(f64::NAN),
            a.ser.unwrap_or(f64::NAN),
            rec.fraction_masked,
        ));
    }
    traj.flush()?;
    drop(traj);
    let manifest = RunManifest {
        name: r.config.name.clone(),
        seed: r.config.seed,
        config_sha256: sha256_hex(snapshot.as_bytes()),
        corpus: corpus_manifest,
        total_steps: r.train.total_steps,
        probe_steps,
        probe_examples: suite.dev.len(),
        checkpoints,
        trajectory_sha256: sha256_hex(&fs::read(&traj_path)?),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Saved checkpoint steps of a run directory, ascending.
pub fn checkpoint_steps(dir: &Path) -> Result<Vec<u64>> {
    let cdir = dir.join("checkpoints");
    let mut steps = Vec::new();
    for entry in fs::read_dir(&cdir).with_context(|| format!("reading {}", cdir.display()))? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(n) = name.strip_prefix("step-").and_then(|s| s.strip_suffix(".ckpt")) {
            steps.push(n.parse::<u64>().with_context(|| format!("checkpoint name {name}"))?);
        }
    }
    steps.sort_unstable();
    Ok(steps)
}

/// Re-runs the probe suite on every saved checkpoint of a run directory,
/// rewriting `probes/` and returning the probe rows in stage order.
pub fn reprobe(dir: &Path, with_beam: bool) -> Result<Vec<MetricRecord>> {
    let mut r = load_snapshot(dir)?;
    if with_beam && r.beam.is_none() {
        r.beam = Some(DecodeConfig::beam(r.model.max_tgt_len));
    }
    let (corpus, _) = load_or_synthesize(dir, &r)?;
    let suite = ProbeSuite::new(&r, &corpus);
    let steps = checkpoint_steps(dir)?;
    if steps.is_empty() {
        bail!("{} holds no checkpoints", dir.display());
    }
    let mut rows = Vec::new();
    for step in steps {
        let ckpt = Checkpoint::load(&checkpoint_path(dir, step))?;
        let mut model = Seq2SeqModel::new(ckpt.model_config.clone())?;
        warm_start(&mut model, &ckpt)?;
        let reports = suite.run(&model, step)?;
        write_json(&probe_path(dir, step), &reports)?;
        rows.extend(records_of(&reports));
    }
    Ok(rows)
}
