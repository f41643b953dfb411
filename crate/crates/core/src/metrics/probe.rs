use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::factual::{sentence_error_rate, unsupported_counts};
use super::lexical::{ngram_overlap, rouge_n};
use super::records::{MetricRecord, Phase};
use super::stats::{mean, summary_probability, BoxStats};
use super::MetricsError;
use crate::corpus::{example_quartiles, Example, SupportOracle, TokenLabel};
use crate::model::{
    beam_decode, greedy_decode_batch, DecodeConfig, Decoded, Seq2SeqModel, Strategy, TokenScores,
};
use crate::token::TokenId;

/// Examples per forward batch. Fixed so results do not depend on the thread
/// count.
pub const PROBE_CHUNK: usize = 32;

/// Per-example probe results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub index: usize,
    pub generated: Option<Vec<TokenId>>,
    pub overlap: Option<[Option<f64>; 4]>,
    pub rouge1: Option<f64>,
    pub rouge2: Option<f64>,
    pub ser: Option<f64>,
    pub unsupported: Option<(usize, usize)>,
    pub ref_overlap: [Option<f64>; 4],
    /// Reference-token probabilities aligned with `reference[1..]`.
    pub ref_probs: Vec<f64>,
    pub ref_labels: Vec<TokenLabel>,
    /// Geometric mean of `ref_probs`.
    pub summary_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMeans {
    pub copied: Option<f64>,
    pub paraphrased: Option<f64>,
    pub hallucinated: Option<f64>,
    /// Copied and paraphrased tokens pooled.
    pub factual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub overlap: [Option<f64>; 4],
    pub ref_overlap: [Option<f64>; 4],
    pub rouge1: Option<f64>,
    pub rouge2: Option<f64>,
    pub ser: Option<f64>,
    /// Pooled over all generated content tokens.
    pub unsupported_rate: Option<f64>,
    pub gen_len: Option<f64>,
    pub label_means: LabelMeans,
    pub top_quartile: Option<BoxStats>,
    pub bottom_quartile: Option<BoxStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub step: u64,
    pub split: String,
    pub strategy: Option<Strategy>,
    pub rows: Vec<ProbeRow>,
    pub aggregates: Aggregates,
}

fn label_means(rows: &[ProbeRow]) -> LabelMeans {
    let pooled = |keep: &dyn Fn(TokenLabel) -> bool| {
        mean(rows.iter().flat_map(|r| {
            r.ref_probs
                .iter()
                .zip(&r.ref_labels)
                .filter(|(_, &l)| keep(l))
                .map(|(&p, _)| p)
        }))
    };
    LabelMeans {
        copied: pooled(&|l| l == TokenLabel::Copied),
        paraphrased: pooled(&|l| l == TokenLabel::Paraphrased),
        hallucinated: pooled(&|l| l == TokenLabel::Hallucinated),
        factual: pooled(&|l| matches!(l, TokenLabel::Copied | TokenLabel::Paraphrased)),
    }
}

/// Aggregates recomputed from rows. `quartiles` are example positions within
/// `rows` (top, bottom).
pub fn aggregate(rows: &[ProbeRow], quartiles: Option<&(Vec<usize>, Vec<usize>)>) -> Aggregates {
    let ngram = |get: &dyn Fn(&ProbeRow) -> Option<f64>| mean(rows.iter().filter_map(get));
    let mut overlap = [None; 4];
    let mut ref_overlap = [None; 4];
    for n in 0..4 {
        overlap[n] = ngram(&|r: &ProbeRow| r.overlap.and_then(|o| o[n]));
        ref_overlap[n] = ngram(&|r: &ProbeRow| r.ref_overlap[n]);
    }
    let (bad, total) = rows
        .iter()
        .filter_map(|r| r.unsupported)
        .fold((0usize, 0usize), |(b, t), (x, y)| (b + x, t + y));
    let subset = |idx: &[usize]| {
        let v: Vec<f64> = idx.iter().map(|&i| rows[i].summary_prob).collect();
        BoxStats::from_values(&v)
    };
    Aggregates {
        overlap,
        ref_overlap,
        rouge1: ngram(&|r: &ProbeRow| r.rouge1),
        rouge2: ngram(&|r: &ProbeRow| r.rouge2),
        ser: ngram(&|r: &ProbeRow| r.ser),
        unsupported_rate: (total > 0).then(|| bad as f64 / total as f64),
        gen_len: ngram(&|r: &ProbeRow| r.generated.as_ref().map(|g| g.len() as f64)),
        label_means: label_means(rows),
        top_quartile: quartiles.and_then(|q| subset(&q.0)),
        bottom_quartile: quartiles.and_then(|q| subset(&q.1)),
    }
}

/// Builds a row from an example, its reference-token scores and an optional
/// generation.
pub fn probe_row<O: SupportOracle + ?Sized>(
    index: usize,
    ex: &Example,
    scores: &TokenScores,
    generated: Option<&[TokenId]>,
    oracle: &O,
) -> ProbeRow {
    let ngrams = |s: &[TokenId]| {
        let mut o = [None; 4];
        for (n, slot) in o.iter_mut().enumerate() {
            *slot = ngram_overlap(s, &ex.article, n + 1);
        }
        o
    };
    let log_probs: Vec<f64> = scores.losses.iter().map(|l| -l).collect();
    ProbeRow {
        index,
        generated: generated.map(<[TokenId]>::to_vec),
        overlap: generated.map(ngrams),
        rouge1: generated.map(|g| rouge_n(g, &ex.reference, 1).f1),
        rouge2: generated.map(|g| rouge_n(g, &ex.reference, 2).f1),
        ser: generated.and_then(|g| sentence_error_rate(g, &ex.article, oracle)),
        unsupported: generated.map(|g| unsupported_counts(g, &ex.article, oracle)),
        ref_overlap: ngrams(&ex.reference),
        ref_probs: scores.probs.clone(),
        ref_labels: ex.labels[1..].to_vec(),
        summary_prob: summary_probability(&log_probs).unwrap_or(0.0),
    }
}

/// Reference-token losses and probabilities under `model`, in example order.
pub fn reference_token_probabilities(
    model: &Seq2SeqModel,
    examples: &[Example],
) -> Result<Vec<TokenScores>, MetricsError> {
    let chunks: Vec<Vec<TokenScores>> = examples
        .par_chunks(PROBE_CHUNK)
        .map(|c| {
            let a: Vec<&[TokenId]> = c.iter().map(|e| e.article.as_slice()).collect();
            let r: Vec<&[TokenId]> = c.iter().map(|e| e.reference.as_slice()).collect();
            model.score_batch(&a, &r)
        })
        .collect::<Result<_, _>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn generate(
    model: &Seq2SeqModel,
    articles: &[&[TokenId]],
    cfg: &DecodeConfig,
) -> Result<Vec<Decoded>, MetricsError> {
    let out: Vec<Vec<Decoded>> = match cfg.strategy {
        Strategy::Greedy => articles
            .par_chunks(PROBE_CHUNK)
            .map(|c| greedy_decode_batch(model, c, cfg))
            .collect::<Result<_, _>>()?,
        Strategy::Beam => articles
            .par_iter()
            .map(|a| beam_decode(model, a, cfg).map(|d| vec![d]))
            .collect::<Result<_, _>>()?,
    };
    Ok(out.into_iter().flatten().collect())
}

/// Full probe of a model snapshot on a fixed example set. With `decode` set,
/// summaries are generated and scored; reference-token probabilities are
/// always computed.
pub fn run_probe<O: SupportOracle + Sync + ?Sized>(
    model: &Seq2SeqModel,
    examples: &[Example],
    decode: Option<&DecodeConfig>,
    oracle: &O,
    step: u64,
    split: &str,
) -> Result<ProbeReport, MetricsError> {
    let scores = reference_token_probabilities(model, examples)?;
    let generated = match decode {
        Some(cfg) => {
            let arts: Vec<&[TokenId]> = examples.iter().map(|e| e.article.as_slice()).collect();
            Some(generate(model, &arts, cfg)?)
        }
        None => None,
    };
    let rows: Vec<ProbeRow> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let g = generated.as_ref().map(|g| g[i].tokens.as_slice());
            probe_row(i, ex, &scores[i], g, oracle)
        })
        .collect();
    let quartiles = example_quartiles(examples).ok();
    let aggregates = aggregate(&rows, quartiles.as_ref());
    Ok(ProbeReport {
        step,
        split: split.to_string(),
        strategy: decode.map(|d| d.strategy),
        rows,
        aggregates,
    })
}

impl ProbeReport {
    /// Flat trajectory rows for every defined aggregate.
    pub fn records(&self) -> Vec<MetricRecord> {
        let a = &self.aggregates;
        let mut named: Vec<(String, Option<f64>)> = Vec::new();
        if self.strategy.is_some() {
            for n in 0..4 {
                named.push((format!("overlap_{}", n + 1), a.overlap[n]));
            }
            named.push(("rouge_1".into(), a.rouge1));
            named.push(("rouge_2".into(), a.rouge2));
            named.push(("ser".into(), a.ser));
            named.push(("unsupported_rate".into(), a.unsupported_rate));
            named.push(("gen_len".into(), a.gen_len));
        }
        for n in 0..4 {
            named.push((format!("ref_overlap_{}", n + 1), a.ref_overlap[n]));
        }
        let lm = &a.label_means;
        named.push(("prob_copied".into(), lm.copied));
        named.push(("prob_paraphrased".into(), lm.paraphrased));
        named.push(("prob_hallucinated".into(), lm.hallucinated));
        named.push(("prob_factual".into(), lm.factual));
        for (side, b) in [("top", a.top_quartile), ("bottom", a.bottom_quartile)] {
            if let Some(b) = b {
                for (k, v) in [
                    ("min", b.min),
                    ("q1", b.q1),
                    ("median", b.median),
                    ("q3", b.q3),
                    ("max", b.max),
                    ("mean", b.mean),
                ] {
                    named.push((format!("summary_prob_{side}_{k}"), Some(v)));
                }
            }
        }
        named
            .into_iter()
            .filter_map(|(m, v)| {
                v.map(|v| {
                    MetricRecord::new(self.step, Phase::Probe, &m, &self.split, v)
                        .expect("probe metrics are registered and finite")
                })
            })
            .collect()
    }
}
