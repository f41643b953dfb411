//! Deterministic teacher-forced training with Adam, global-norm clipping,
//! loss truncation, checkpoints and warm starts.

mod checkpoint;
mod optim;

pub use checkpoint::{config_digest, Checkpoint, SamplerState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{
    adam_step, clip_grad_norm, global_norm, scheduled_lr, AdamParams, AdamState, LrSchedule,
};

use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Example;
use crate::metrics::{MetricRecord, Phase};
use crate::model::{ModelConfig, ModelError, Seq2SeqModel};
use crate::tensor::{Tape, TensorError};
use crate::token::TokenId;
use crate::truncation::{TruncationConfig, TruncationError, TruncationMode, Truncator};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("checkpoint was written for a different configuration (digest mismatch)")]
    DigestMismatch,
    #[error("checkpoint does not match the model: {0}")]
    ConfigMismatch(String),
    #[error("non-finite value in `{op}` at step {step}, batch examples {batch:?}")]
    NonFinite {
        step: u64,
        batch: Vec<usize>,
        op: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Truncation(#[from] TruncationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    pub lr_schedule: LrSchedule,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub truncation: TruncationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 10_000,
            batch_size: 16,
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_grad_norm: 1.0,
            lr_schedule: LrSchedule::Linear,
            checkpoint_every: 1_000,
            seed: 0,
            truncation: TruncationConfig::default(),
            init_from: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: String| Err(TrainError::Config { field, reason });
        if self.total_steps == 0 {
            return bad("train.total_steps", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size", "must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("train.learning_rate", format!("{} is not a nonnegative number", self.learning_rate));
        }
        for (field, b) in [("train.adam_beta1", self.adam_beta1), ("train.adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(field, format!("{b} is outside [0, 1)"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad("train.adam_eps", "must be positive".into());
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm > 0.0) {
            return bad("train.max_grad_norm", "must be positive".into());
        }
        if self.checkpoint_every == 0 || self.checkpoint_every > self.total_steps {
            return bad(
                "train.checkpoint_every",
                format!("must be in 1..={}", self.total_steps),
            );
        }
        self.truncation.validate()?;
        if self.truncation.mode != TruncationMode::Off
            && self.truncation.warmup_steps >= self.total_steps
        {
            return bad(
                "train.truncation.warmup_steps",
                format!(
                    "{} leaves no truncated steps out of {}",
                    self.truncation.warmup_steps, self.total_steps
                ),
            );
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Steps at which checkpoints are taken: every multiple of
    /// `checkpoint_every`, plus the final step.
    pub fn checkpoint_steps(&self) -> Vec<u64> {
        let mut s: Vec<u64> = (1..=self.total_steps / self.checkpoint_every)
            .map(|k| k * self.checkpoint_every)
            .collect();
        if s.last() != Some(&self.total_steps) {
            s.push(self.total_steps);
        }
        s
    }

    pub fn is_checkpoint_step(&self, t: u64) -> bool {
        t == self.total_steps || (t > 0 && t % self.checkpoint_every == 0)
    }
}

/// Telemetry of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    /// `sum(m * l) / sum(m)`, or 0 when every token is masked.
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub tokens: usize,
    pub threshold: f64,
    pub fraction_masked: f64,
    pub mode: TruncationMode,
}

impl StepRecord {
    pub fn records(&self) -> Vec<MetricRecord> {
        let mode = self.mode.name();
        [
            ("loss", "train", self.loss),
            ("lr", "train", self.lr),
            ("grad_norm", "train", self.grad_norm),
            ("tokens", "train", self.tokens as f64),
            ("threshold", mode, self.threshold),
            ("fraction_masked", mode, self.fraction_masked),
        ]
        .into_iter()
        .map(|(m, split, v)| {
            MetricRecord::new(self.step, Phase::Train, m, split, v)
                .expect("training telemetry is registered and finite")
        })
        .collect()
    }
}

fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

fn check_corpus(model: &ModelConfig, corpus: &[Example]) -> Result<()> {
    if corpus.is_empty() {
        return Err(TrainError::Config {
            field: "corpus",
            reason: "training corpus is empty".into(),
        });
    }
    for (i, e) in corpus.iter().enumerate() {
        let oov = e
            .article
            .iter()
            .chain(&e.reference)
            .any(|&t| t as usize >= model.vocab_size);
        let reason = if oov {
            Some(format!("token id outside vocabulary of {}", model.vocab_size))
        } else if e.article.is_empty() || e.article.len() > model.max_src_len {
            Some(format!("article length {} not in 1..={}", e.article.len(), model.max_src_len))
        } else if e.reference.len() < 2 || e.reference.len() > model.max_tgt_len + 1 {
            Some(format!(
                "reference length {} not in 2..={}",
                e.reference.len(),
                model.max_tgt_len + 1
            ))
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(TrainError::Config {
                field: "corpus",
                reason: format!("example {i}: {reason}"),
            });
        }
    }
    Ok(())
}

/// Replaces `model`'s parameters with a checkpoint's. The architecture must
/// match exactly (the init seed is ignored); nothing is modified on error.
pub fn warm_start(model: &mut Seq2SeqModel, ckpt: &Checkpoint) -> Result<()> {
    let want = ModelConfig {
        seed: 0,
        ..model.config().clone()
    };
    let have = ModelConfig {
        seed: 0,
        ..ckpt.model_config.clone()
    };
    if want != have {
        return Err(TrainError::ConfigMismatch(format!(
            "checkpoint model {have:?} differs from {want:?}"
        )));
    }
    let manifest = model.manifest();
    if manifest.len() != ckpt.params.len() {
        return Err(TrainError::ConfigMismatch(format!(
            "{} parameter arrays in checkpoint, model has {}",
            ckpt.params.len(),
            manifest.len()
        )));
    }
    for ((name, shape), (cname, data)) in manifest.iter().zip(&ckpt.params) {
        let n: usize = shape.iter().product();
        if name != cname || n != data.len() {
            return Err(TrainError::ConfigMismatch(format!(
                "array `{cname}` ({} values) where `{name}` ({n} values) was expected",
                data.len()
            )));
        }
    }
    for (p, (_, data)) in model.params_mut().iter_mut().zip(&ckpt.params) {
        p.tensor.assign(data).map_err(ModelError::from)?;
    }
    Ok(())
}

/// Training state: model, optimizer, truncation windows and batch sampler.
/// Cloning gives an independent copy that continues identically.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Seq2SeqModel,
    cfg: TrainConfig,
    digest: [u8; 32],
    corpus: Arc<Vec<Example>>,
    adam: AdamState,
    truncator: Truncator,
    step: u64,
    sampler: SamplerState,
    perm: Vec<usize>,
}

impl Trainer {
    /// Fresh run. With `cfg.init_from` set, parameters come from that
    /// checkpoint while optimizer state and step start at zero.
    pub fn new(model: Seq2SeqModel, corpus: Arc<Vec<Example>>, cfg: TrainConfig) -> Result<Self> {
        let mut model = model;
        cfg.validate()?;
        check_corpus(model.config(), &corpus)?;
        if let Some(path) = &cfg.init_from {
            let ckpt = Checkpoint::load(path)?;
            warm_start(&mut model, &ckpt)?;
        }
        let adam = AdamState::zeros(model.params().iter().map(|p| p.tensor.numel()));
        let truncator = Truncator::new(cfg.truncation.clone())?;
        let digest = config_digest(model.config(), &cfg);
        let sampler = SamplerState {
            seed: cfg.seed,
            epoch: 0,
            cursor: 0,
        };
        let perm = epoch_permutation(cfg.seed, 0, corpus.len());
        Ok(Self {
            model,
            cfg,
            digest,
            corpus,
            adam,
            truncator,
            step: 0,
            sampler,
            perm,
        })
    }

    /// Continues a run from a checkpoint written under the same configuration.
    pub fn resume(
        model_cfg: ModelConfig,
        corpus: Arc<Vec<Example>>,
        cfg: TrainConfig,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        cfg.validate()?;
        if ckpt.digest != config_digest(&model_cfg, &cfg) {
            return Err(TrainError::DigestMismatch);
        }
        let mut model = Seq2SeqModel::new(model_cfg)?;
        warm_start(&mut model, ckpt)?;
        check_corpus(model.config(), &corpus)?;
        if ckpt.sampler.seed != cfg.seed || ckpt.sampler.cursor > corpus.len() as u64 {
            return Err(TrainError::Format("sampler state does not fit the corpus".into()));
        }
        if ckpt.token_window.capacity() != cfg.truncation.window
            || ckpt.example_window.capacity() != cfg.truncation.window
        {
            return Err(TrainError::Format("loss window capacity differs from config".into()));
        }
        let mut truncator = Truncator::new(cfg.truncation.clone())?;
        truncator.restore(ckpt.token_window.clone(), ckpt.example_window.clone());
        let adam = AdamState {
            step: ckpt.step,
            m: ckpt.adam_m.clone(),
            v: ckpt.adam_v.clone(),
        };
        let perm = epoch_permutation(cfg.seed, ckpt.sampler.epoch, corpus.len());
        Ok(Self {
            model,
            digest: ckpt.digest,
            cfg,
            corpus,
            adam,
            truncator,
            step: ckpt.step,
            sampler: ckpt.sampler,
            perm,
        })
    }

    /// Copy of this run under a different truncation setting. Allowed while no
    /// step past the new warmup has been taken, so the copy is identical to a
    /// run started with that setting.
    pub fn fork(&self, truncation: TruncationConfig) -> Result<Self> {
        if self.step > truncation.warmup_steps {
            return Err(TrainError::Config {
                field: "train.truncation.warmup_steps",
                reason: format!(
                    "cannot fork at step {} past warmup {}",
                    self.step, truncation.warmup_steps
                ),
            });
        }
        if truncation.window != self.cfg.truncation.window {
            return Err(TrainError::Config {
                field: "train.truncation.window",
                reason: "forked runs must share the window size".into(),
            });
        }
        let cfg = TrainConfig {
            truncation: truncation.clone(),
            ..self.cfg.clone()
        };
        cfg.validate()?;
        let mut out = self.clone();
        out.digest = config_digest(self.model.config(), &cfg);
        let mut truncator = Truncator::new(truncation)?;
        truncator.restore(
            self.truncator.token_window().clone(),
            self.truncator.example_window().clone(),
        );
        out.truncator = truncator;
        out.cfg = cfg;
        Ok(out)
    }

    pub fn model(&self) -> &Seq2SeqModel {
        &self.model
    }

    pub fn into_model(self) -> Seq2SeqModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    pub fn truncator(&self) -> &Truncator {
        &self.truncator
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            digest: self.digest,
            model_config: self.model.config().clone(),
            params: self
                .model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.tensor.data().to_vec()))
                .collect(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
            sampler: self.sampler,
            token_window: self.truncator.token_window().clone(),
            example_window: self.truncator.example_window().clone(),
        }
    }

    /// Example indices of the next batch; advances the sampler.
    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.corpus.len();
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            if self.sampler.cursor as usize == n {
                self.sampler.epoch += 1;
                self.sampler.cursor = 0;
                self.perm = epoch_permutation(self.cfg.seed, self.sampler.epoch, n);
            }
            out.push(self.perm[self.sampler.cursor as usize]);
            self.sampler.cursor += 1;
        }
        out
    }

    /// One optimizer step on the next batch.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        if self.is_done() {
            return Err(TrainError::Config {
                field: "train.total_steps",
                reason: format!("run already finished at step {}", self.step),
            });
        }
        let t = self.step + 1;
        let batch = self.next_batch();
        let corpus = Arc::clone(&self.corpus);
        let arts: Vec<&[TokenId]> = batch.iter().map(|&i| corpus[i].article.as_slice()).collect();
        let refs: Vec<&[TokenId]> = batch.iter().map(|&i| corpus[i].reference.as_slice()).collect();
        let non_finite = |e: TrainError| match e {
            TrainError::Model(ModelError::Tensor(TensorError::NonFinite { op })) => TrainError::NonFinite {
                op: op.to_string(),
                step: t,
                batch: batch.clone(),
            },
            other => other,
        };

        let (loss, tokens, mask, mut grads) = {
            let mut tape = Tape::new();
            let pv = self.model.attach(&mut tape);
            let tf = self
                .model
                .teacher_forced(&mut tape, &pv, &arts, &refs)
                .map_err(|e| non_finite(e.into()))?;
            let valid = tf.valid_mask();
            let sm = self
                .truncator
                .step(t, tape.value(tf.nll), &valid, tf.width)?;
            let denom: f64 = sm.mask.iter().sum();
            let tokens = valid.iter().filter(|&&v| v).count();
            let zeros = || -> Vec<Vec<f64>> {
                self.model
                    .params()
                    .iter()
                    .map(|p| vec![0.0; p.tensor.numel()])
                    .collect()
            };
            if denom > 0.0 {
                let w: Vec<f64> = sm.mask.iter().map(|m| m / denom).collect();
                let obj = tape
                    .weighted_sum(tf.nll, &w)
                    .map_err(|e| non_finite(ModelError::from(e).into()))?;
                let g = tape
                    .backward(obj)
                    .map_err(|e| non_finite(ModelError::from(e).into()))?;
                let grads: Vec<Vec<f64>> = pv
                    .0
                    .iter()
                    .zip(self.model.params())
                    .map(|(&v, p)| {
                        g.get(v)
                            .map(<[f64]>::to_vec)
                            .unwrap_or_else(|| vec![0.0; p.tensor.numel()])
                    })
                    .collect();
                (tape.value(obj)[0], tokens, sm, grads)
            } else {
                (0.0, tokens, sm, zeros())
            }
        };

        let grad_norm = clip_grad_norm(&mut grads, self.cfg.max_grad_norm);
        if !grad_norm.is_finite() {
            return Err(non_finite(TrainError::Model(ModelError::Tensor(
                TensorError::NonFinite { op: "grad_norm" },
            ))));
        }
        let lr = scheduled_lr(
            self.cfg.learning_rate,
            self.cfg.lr_schedule,
            t,
            self.cfg.total_steps,
        );
        let hp = self.cfg.adam();
        {
            let mut params: Vec<&mut [f64]> = self
                .model
                .params_mut()
                .iter_mut()
                .map(|p| p.tensor.data_mut())
                .collect();
            adam_step(&mut params, &grads, &mut self.adam, &hp, lr);
        }
        for p in self.model.params() {
            if p.tensor.data().iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite {
                    step: t,
                    batch,
                    op: format!("adam update of `{}`", p.name),
                });
            }
        }
        self.step = t;
        Ok(StepRecord {
            step: t,
            loss,
            lr,
            grad_norm,
            tokens,
            threshold: mask.threshold,
            fraction_masked: mask.fraction_masked,
            mode: self.cfg.truncation.mode,
        })
    }

    /// Trains up to step `until` (capped at the total), calling `on_checkpoint`
    /// after every checkpoint step.
    pub fn run_until<F>(&mut self, until: u64, mut on_checkpoint: F) -> Result<Vec<StepRecord>>
    where
        F: FnMut(&Trainer) -> Result<()>,
    {
        let until = until.min(self.cfg.total_steps);
        let mut out = Vec::new();
        while self.step < until {
            out.push(self.train_step()?);
            if self.cfg.is_checkpoint_step(self.step) {
                on_checkpoint(self)?;
            }
        }
        Ok(out)
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Seq2SeqModel,
    pub checkpoints: Vec<Checkpoint>,
    pub records: Vec<MetricRecord>,
}

/// Runs a full training job, keeping every checkpoint in memory.
pub fn train(model: Seq2SeqModel, corpus: Arc<Vec<Example>>, cfg: TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, corpus, cfg)?;
    let mut checkpoints = Vec::new();
    let steps = trainer.run_until(u64::MAX, |t| {
        checkpoints.push(t.checkpoint());
        Ok(())
    })?;
    Ok(TrainOutcome {
        model: trainer.into_model(),
        checkpoints,
        records: steps.iter().flat_map(StepRecord::records).collect(),
    })
}
