use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{Encoded, ModelError, Result, Seq2SeqModel};
use crate::tensor::Tape;
use crate::token::{TokenId, BOS, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam,
}

/// Decoding settings. Lengths count generated tokens (EOS included, BOS not).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub num_beams: usize,
    pub length_penalty: f64,
    /// Size of n-grams that may not repeat within a hypothesis; 0 disables.
    pub no_repeat_ngram: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            strategy: Strategy::Greedy,
            num_beams: 1,
            length_penalty: 1.0,
            no_repeat_ngram: 0,
            min_len: 0,
            max_len,
        }
    }

    /// Beam settings scaled from the usual abstractive-summarization setup:
    /// 6 beams, length penalty 2, no repeated trigrams.
    pub fn beam(max_len: usize) -> Self {
        Self {
            strategy: Strategy::Beam,
            num_beams: 6,
            length_penalty: 2.0,
            no_repeat_ngram: 3,
            min_len: 0,
            max_len,
        }
    }

    pub fn validate(&self, max_tgt_len: usize) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.max_len == 0 {
            return bad("decode.max_len must be positive".into());
        }
        if self.min_len > self.max_len {
            return bad(format!(
                "decode.min_len {} exceeds decode.max_len {}",
                self.min_len, self.max_len
            ));
        }
        if self.max_len > max_tgt_len {
            return bad(format!(
                "decode.max_len {} exceeds model max_tgt_len {max_tgt_len}",
                self.max_len
            ));
        }
        if self.num_beams == 0 {
            return bad("decode.num_beams must be at least 1".into());
        }
        if !(self.length_penalty >= 0.0) || !self.length_penalty.is_finite() {
            return bad("decode.length_penalty must be a nonnegative number".into());
        }
        Ok(())
    }
}

/// A decoded sequence. `finished` is false when `max_len` was reached without
/// an EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    pub finished: bool,
}

/// Source of next-token log-probabilities. Requests pair a source index with a
/// decoder prefix that starts with BOS.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    fn next_log_probs(&self, requests: &[(usize, &[TokenId])]) -> Result<Vec<Vec<f64>>>;
}

/// Scorer backed by a model and a set of pre-encoded articles.
pub struct ModelScorer<'m> {
    model: &'m Seq2SeqModel,
    memory: Vec<f64>,
    lens: Vec<usize>,
    width: usize,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Seq2SeqModel, articles: &[&[TokenId]]) -> Result<Self> {
        let mut tape = Tape::new();
        let pv = model.attach(&mut tape);
        let enc = model.encode(&mut tape, &pv, articles)?;
        Ok(Self {
            model,
            memory: tape.value(enc.memory).to_vec(),
            lens: enc.lens,
            width: enc.width,
        })
    }
}

impl NextTokenScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn next_log_probs(&self, requests: &[(usize, &[TokenId])]) -> Result<Vec<Vec<f64>>> {
        let d = self.model.config().d_model;
        let row = self.width * d;
        let mut mem = Vec::with_capacity(requests.len() * row);
        let mut lens = Vec::with_capacity(requests.len());
        for &(src, _) in requests {
            if src >= self.lens.len() {
                return Err(ModelError::Contract(format!("unknown source {src}")));
            }
            mem.extend_from_slice(&self.memory[src * row..(src + 1) * row]);
            lens.push(self.lens[src]);
        }
        let mut tape = Tape::new();
        let pv = self.model.attach(&mut tape);
        let memory = Encoded {
            memory: tape.constant(vec![requests.len() * self.width, d], mem)?,
            lens,
            width: self.width,
        };
        let prefixes: Vec<&[TokenId]> = requests.iter().map(|r| r.1).collect();
        let (logits, width) = self.model.decode_logits(&mut tape, &pv, &memory, &prefixes)?;
        let logp = tape.log_softmax(logits)?;
        let v = self.vocab_size();
        let all = tape.value(logp);
        Ok(prefixes
            .iter()
            .enumerate()
            .map(|(b, p)| {
                let r = b * width + p.len() - 1;
                all[r * v..(r + 1) * v].to_vec()
            })
            .collect())
    }
}

/// True if appending `next` to `hyp` would repeat an n-gram already in `hyp`.
fn repeats_ngram(hyp: &[TokenId], next: TokenId, n: usize) -> bool {
    if n == 0 || hyp.len() + 1 < n {
        return false;
    }
    let prefix = &hyp[hyp.len() + 1 - n..];
    hyp.windows(n)
        .any(|w| w[..n - 1] == *prefix && w[n - 1] == next)
}

/// Applies the hard constraints shared by greedy and beam search.
fn constrain(logp: &mut [f64], hyp: &[TokenId], cfg: &DecodeConfig) {
    logp[PAD as usize] = f64::NEG_INFINITY;
    logp[BOS as usize] = f64::NEG_INFINITY;
    if hyp.len() < cfg.min_len {
        logp[EOS as usize] = f64::NEG_INFINITY;
    }
    if cfg.no_repeat_ngram > 0 {
        for (t, lp) in logp.iter_mut().enumerate() {
            if *lp > f64::NEG_INFINITY && repeats_ngram(hyp, t as TokenId, cfg.no_repeat_ngram) {
                *lp = f64::NEG_INFINITY;
            }
        }
    }
}

fn with_bos(hyp: &[TokenId]) -> Vec<TokenId> {
    let mut p = Vec::with_capacity(hyp.len() + 1);
    p.push(BOS);
    p.extend_from_slice(hyp);
    p
}

/// Greedy decoding for sources `0..n_sources`, batched across sources.
/// Ties go to the lowest token id.
pub fn greedy_search(
    scorer: &dyn NextTokenScorer,
    n_sources: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Decoded>> {
    if scorer.vocab_size() <= EOS as usize {
        return Err(ModelError::Contract("vocabulary too small to decode".into()));
    }
    let mut hyps: Vec<Vec<TokenId>> = vec![Vec::new(); n_sources];
    let mut done = vec![false; n_sources];
    let mut finished = vec![false; n_sources];
    for _ in 0..cfg.max_len {
        let active: Vec<usize> = (0..n_sources).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<TokenId>> = active.iter().map(|&i| with_bos(&hyps[i])).collect();
        let requests: Vec<(usize, &[TokenId])> = active
            .iter()
            .zip(&prefixes)
            .map(|(&i, p)| (i, p.as_slice()))
            .collect();
        let scores = scorer.next_log_probs(&requests)?;
        for (&i, mut logp) in active.iter().zip(scores) {
            constrain(&mut logp, &hyps[i], cfg);
            let mut best: Option<(usize, f64)> = None;
            for (t, &lp) in logp.iter().enumerate() {
                if lp > f64::NEG_INFINITY && best.is_none_or(|(_, b)| lp > b) {
                    best = Some((t, lp));
                }
            }
            match best {
                None => done[i] = true,
                Some((t, _)) => {
                    hyps[i].push(t as TokenId);
                    if t as TokenId == EOS {
                        done[i] = true;
                        finished[i] = true;
                    }
                }
            }
        }
    }
    Ok(hyps
        .into_iter()
        .zip(finished)
        .map(|(tokens, finished)| Decoded { tokens, finished })
        .collect())
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<TokenId>,
    logp: f64,
}

#[derive(Debug, Clone)]
struct Finished {
    tokens: Vec<TokenId>,
    score: f64,
    step: usize,
}

fn penalized(logp: f64, len: usize, penalty: f64) -> f64 {
    logp / (len.max(1) as f64).powf(penalty)
}

/// Length-penalized beam search for one source.
///
/// A finished hypothesis scores `sum log p / len^length_penalty` with `len`
/// counting EOS. Search stops once `num_beams` hypotheses have finished, no
/// live beam remains, or `max_len` is reached. Ties prefer the earlier
/// finishing step, then the lexicographically smaller token sequence.
pub fn beam_search(scorer: &dyn NextTokenScorer, source: usize, cfg: &DecodeConfig) -> Result<Decoded> {
    let k = cfg.num_beams.max(1);
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        logp: 0.0,
    }];
    let mut finished: Vec<Finished> = Vec::new();
    for step in 0..cfg.max_len {
        let prefixes: Vec<Vec<TokenId>> = live.iter().map(|h| with_bos(&h.tokens)).collect();
        let requests: Vec<(usize, &[TokenId])> =
            prefixes.iter().map(|p| (source, p.as_slice())).collect();
        let scores = scorer.next_log_probs(&requests)?;
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
        for (b, (h, mut logp)) in live.iter().zip(scores).enumerate() {
            constrain(&mut logp, &h.tokens, cfg);
            for (t, &lp) in logp.iter().enumerate() {
                if lp > f64::NEG_INFINITY {
                    cands.push((h.logp + lp, b, t as TokenId));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(k);
        for (rank, &(score, b, t)) in cands.iter().take(2 * k).enumerate() {
            let mut tokens = live[b].tokens.clone();
            tokens.push(t);
            if t == EOS {
                if rank < k {
                    let score = penalized(score, tokens.len(), cfg.length_penalty);
                    finished.push(Finished {
                        tokens,
                        score,
                        step,
                    });
                }
            } else {
                next.push(Hyp { tokens, logp: score });
                if next.len() == k {
                    break;
                }
            }
        }
        live = next;
        if finished.len() >= k || live.is_empty() {
            break;
        }
    }
    if finished.is_empty() {
        let best = live
            .into_iter()
            .map(|h| {
                let s = penalized(h.logp, h.tokens.len(), cfg.length_penalty);
                (s, h.tokens)
            })
            .min_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        return Ok(Decoded {
            tokens: best.map(|b| b.1).unwrap_or_default(),
            finished: false,
        });
    }
    finished.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(a.step.cmp(&b.step))
            .then(a.tokens.cmp(&b.tokens))
    });
    Ok(Decoded {
        tokens: finished.swap_remove(0).tokens,
        finished: true,
    })
}

pub fn greedy_decode(model: &Seq2SeqModel, article: &[TokenId], cfg: &DecodeConfig) -> Result<Decoded> {
    Ok(greedy_decode_batch(model, &[article], cfg)?
        .pop()
        .expect("one article in, one decode out"))
}

pub fn greedy_decode_batch(
    model: &Seq2SeqModel,
    articles: &[&[TokenId]],
    cfg: &DecodeConfig,
) -> Result<Vec<Decoded>> {
    cfg.validate(model.config().max_tgt_len)?;
    if articles.is_empty() {
        return Ok(Vec::new());
    }
    let scorer = ModelScorer::new(model, articles)?;
    greedy_search(&scorer, articles.len(), cfg)
}

pub fn beam_decode(model: &Seq2SeqModel, article: &[TokenId], cfg: &DecodeConfig) -> Result<Decoded> {
    cfg.validate(model.config().max_tgt_len)?;
    let scorer = ModelScorer::new(model, &[article])?;
    beam_search(&scorer, 0, cfg)
}
