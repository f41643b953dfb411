//! Experiment configuration: one TOML document with nested sections for the
//! vocabulary, corpus, model, training, decoding and probing.
//!
//! A single top-level `seed` drives corpus synthesis, parameter init and batch
//! order. Derived values (vocabulary size, sequence limits, checkpoint spacing)
//! are filled in by [`ExperimentConfig::resolve`] and written back into the
//! snapshot so a run directory records exactly what was executed.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trunclab_core::corpus::{SynthConfig, VocabConfig, Vocabulary};
use trunclab_core::model::{DecodeConfig, ModelConfig, Strategy};
use trunclab_core::trainer::TrainConfig;

/// Invalid configuration or command-line usage; maps to exit code 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub const PRESETS: &[(&str, &str)] = &[
    ("xsum-like", include_str!("../configs/xsum-like.toml")),
    ("xsum-like-factuality", include_str!("../configs/xsum-like-factuality.toml")),
    (
        "xsum-like-sentence-factuality",
        include_str!("../configs/xsum-like-sentence-factuality.toml"),
    ),
    ("cnndm-like", include_str!("../configs/cnndm-like.toml")),
    ("cnndm-like-abstractive", include_str!("../configs/cnndm-like-abstractive.toml")),
    ("mediasum-like", include_str!("../configs/mediasum-like.toml")),
    ("mediasum-like-abstractive", include_str!("../configs/mediasum-like-abstractive.toml")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Size of the held-out split the probe set is drawn from.
    pub dev_examples: usize,
    /// Line-delimited JSON triples for analysis-only use.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ingest: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dev_examples: 800,
            ingest: None,
        }
    }
}

/// Architecture knobs; vocabulary size and sequence limits follow the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 64,
        }
    }
}

/// Decoding for generation probes. `max_len = 0` means the model's target limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub strategy: Strategy,
    pub num_beams: usize,
    pub length_penalty: f64,
    pub no_repeat_ngram: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Also run a beam probe (6 beams, penalty 2, no repeated trigrams) at
    /// every stage, recorded under split `dev_beam`.
    pub extra_beam_probe: bool,
}

impl Default for DecodeSection {
    fn default() -> Self {
        let g = DecodeConfig::greedy(1);
        Self {
            strategy: g.strategy,
            num_beams: g.num_beams,
            length_penalty: g.length_penalty,
            no_repeat_ngram: g.no_repeat_ngram,
            min_len: g.min_len,
            max_len: 0,
            extra_beam_probe: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Dev examples used for generation probes.
    pub size: usize,
    /// Number of probe stages; sets the checkpoint spacing to `total_steps / stages`.
    /// With 0 the `train.checkpoint_every` value is used as given.
    pub stages: u64,
    /// Training examples scored for reference-token probabilities (split `train`).
    pub train_sample: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            size: 800,
            stages: 10,
            train_sample: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub vocab: VocabConfig,
    pub synth: SynthConfig,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub decode: DecodeSection,
    pub probe: ProbeSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            vocab: VocabConfig {
                article_pool: 48,
                halluc_pool: 28,
            },
            synth: SynthConfig {
                n_examples: 2000,
                ..SynthConfig::default()
            },
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            decode: DecodeSection::default(),
            probe: ProbeSection::default(),
        }
    }
}

/// Fully derived settings ready to run.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub vocab: Vocabulary,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub beam: Option<DecodeConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| config_err(format!("config: {e}")))
    }

    pub fn preset(name: &str) -> Option<Self> {
        PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_toml(text).expect("shipped presets parse"))
    }

    /// Reads a config file, or a shipped preset when `spec` names one and is
    /// not an existing path.
    pub fn load(spec: &str) -> anyhow::Result<Self> {
        let path = Path::new(spec);
        if path.exists() {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
            return Self::from_toml(&text);
        }
        Self::preset(spec).ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            config_err(format!(
                "`{spec}` is neither a file nor a preset ({})",
                names.join(", ")
            ))
        })
    }

    /// Canonical TOML text; the digest of a run is the hash of this text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Checks every section and derives the runnable settings. The returned
    /// `config` has the derived values written back.
    pub fn resolve(&self) -> anyhow::Result<Resolved> {
        let mut cfg = self.clone();
        let vocab = Vocabulary::new(&cfg.vocab).map_err(|e| config_err(e.to_string()))?;
        cfg.synth.seed = cfg.seed;
        cfg.synth.validate().map_err(|e| config_err(e.to_string()))?;
        if cfg.data.dev_examples == 0 {
            return Err(config_err("invalid `data.dev_examples`: must be at least 1"));
        }
        if cfg.probe.size == 0 || cfg.probe.size > cfg.data.dev_examples {
            return Err(config_err(format!(
                "invalid `probe.size`: {} must be in 1..={} (data.dev_examples)",
                cfg.probe.size, cfg.data.dev_examples
            )));
        }
        let model = ModelConfig {
            vocab_size: vocab.size(),
            d_model: cfg.model.d_model,
            n_heads: cfg.model.n_heads,
            n_enc_layers: cfg.model.n_enc_layers,
            n_dec_layers: cfg.model.n_dec_layers,
            d_ff: cfg.model.d_ff,
            max_src_len: cfg.synth.article_len(),
            max_tgt_len: cfg.synth.reference_len() - 1,
            seed: cfg.seed,
        };
        model
            .validate()
            .map_err(|e| config_err(format!("model: {e}")))?;

        cfg.train.seed = cfg.seed;
        if cfg.probe.stages > 0 {
            let t = cfg.train.total_steps;
            if t % cfg.probe.stages != 0 {
                return Err(config_err(format!(
                    "invalid `probe.stages`: {} does not divide train.total_steps {t}",
                    cfg.probe.stages
                )));
            }
            cfg.train.checkpoint_every = t / cfg.probe.stages;
        }
        cfg.train.validate().map_err(|e| config_err(e.to_string()))?;

        if cfg.decode.max_len == 0 {
            cfg.decode.max_len = model.max_tgt_len;
        }
        let d = &cfg.decode;
        let decode = DecodeConfig {
            strategy: d.strategy,
            num_beams: d.num_beams,
            length_penalty: d.length_penalty,
            no_repeat_ngram: d.no_repeat_ngram,
            min_len: d.min_len,
            max_len: d.max_len,
        };
        decode
            .validate(model.max_tgt_len)
            .map_err(|e| config_err(format!("decode: {e}")))?;
        let beam = d.extra_beam_probe.then(|| DecodeConfig::beam(model.max_tgt_len));

        Ok(Resolved {
            vocab,
            synth: cfg.synth.clone(),
            train: cfg.train.clone(),
            model,
            decode,
            beam,
            config: cfg,
        })
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
