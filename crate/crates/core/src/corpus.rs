//! Synthetic article/summary corpora with per-token provenance labels,
//! ingestion of external text triples, and the binary corpus cache.
//!
//! Token id layout of a [`Vocabulary`] with article pool size `A` and
//! hallucination pool size `H`:
//!
//! | range                      | role                                   |
//! |----------------------------|----------------------------------------|
//! | `0..4`                     | PAD, BOS, EOS, SEP                     |
//! | `4..4+A`                   | article pool (articles sample from it) |
//! | `4+A..4+2A`                | synonyms, `syn(t) = t + A`             |
//! | `4+2A..4+2A+H`             | hallucination ids                      |

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::ngram_overlap;
use crate::token::{is_special, TokenId, BOS, EOS, SEP, SPECIAL_COUNT};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { field: &'static str, line: usize },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("corpus cache: {0}")]
    Format(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Decides whether a token is grounded in an article.
pub trait SupportOracle {
    fn supported(&self, token: TokenId, article: &[TokenId]) -> bool;

    /// Tokens that close a sentence in addition to SEP and EOS.
    fn is_sentence_end(&self, _token: TokenId) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub article_pool: usize,
    pub halluc_pool: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            article_pool: 96,
            halluc_pool: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    article_pool: u32,
    halluc_pool: u32,
}

impl Vocabulary {
    pub fn new(cfg: &VocabConfig) -> Result<Self> {
        if cfg.article_pool == 0 {
            return Err(CorpusError::Config {
                field: "vocab.article_pool",
                reason: "must be at least 1".into(),
            });
        }
        if cfg.halluc_pool == 0 {
            return Err(CorpusError::Config {
                field: "vocab.halluc_pool",
                reason: "must be at least 1".into(),
            });
        }
        let total = SPECIAL_COUNT as u64 + 2 * cfg.article_pool as u64 + cfg.halluc_pool as u64;
        if total > u32::MAX as u64 {
            return Err(CorpusError::Config {
                field: "vocab",
                reason: "vocabulary exceeds the u32 id space".into(),
            });
        }
        Ok(Self {
            article_pool: cfg.article_pool as u32,
            halluc_pool: cfg.halluc_pool as u32,
        })
    }

    pub fn size(&self) -> usize {
        (SPECIAL_COUNT + 2 * self.article_pool + self.halluc_pool) as usize
    }

    pub fn article_pool(&self) -> std::ops::Range<TokenId> {
        SPECIAL_COUNT..SPECIAL_COUNT + self.article_pool
    }

    pub fn synonyms(&self) -> std::ops::Range<TokenId> {
        let s = SPECIAL_COUNT + self.article_pool;
        s..s + self.article_pool
    }

    /// Article pool plus synonyms.
    pub fn content_ids(&self) -> std::ops::Range<TokenId> {
        SPECIAL_COUNT..SPECIAL_COUNT + 2 * self.article_pool
    }

    pub fn halluc_ids(&self) -> std::ops::Range<TokenId> {
        let s = SPECIAL_COUNT + 2 * self.article_pool;
        s..s + self.halluc_pool
    }

    pub fn paraphrase(&self, t: TokenId) -> Option<TokenId> {
        self.article_pool().contains(&t).then(|| t + self.article_pool)
    }

    pub fn unparaphrase(&self, t: TokenId) -> Option<TokenId> {
        self.synonyms().contains(&t).then(|| t - self.article_pool)
    }

    pub fn is_halluc(&self, t: TokenId) -> bool {
        self.halluc_ids().contains(&t)
    }
}

impl SupportOracle for Vocabulary {
    fn supported(&self, token: TokenId, article: &[TokenId]) -> bool {
        is_special(token)
            || article.contains(&token)
            || self.unparaphrase(token).is_some_and(|s| article.contains(&s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum TokenLabel {
    Copied = 0,
    Paraphrased = 1,
    Hallucinated = 2,
    Special = 3,
}

impl TokenLabel {
    pub const ALL: [TokenLabel; 4] = [
        TokenLabel::Copied,
        TokenLabel::Paraphrased,
        TokenLabel::Hallucinated,
        TokenLabel::Special,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TokenLabel::Copied => "copied",
            TokenLabel::Paraphrased => "paraphrased",
            TokenLabel::Hallucinated => "hallucinated",
            TokenLabel::Special => "special",
        }
    }
}

/// Which article sentences a summary draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentenceSelection {
    /// The leading sentences.
    #[default]
    Lead,
    /// A uniformly random distinct subset, kept in article order.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_examples: usize,
    pub article_sentences: usize,
    pub sentence_len: usize,
    pub summary_sentences: usize,
    /// Probability that a summary sentence is copied verbatim.
    pub extractive_prob: f64,
    /// Per-token probability of replacing a summary token by a hallucination id.
    pub halluc_rate: f64,
    #[serde(default)]
    pub selection: SentenceSelection,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_examples: 1000,
            article_sentences: 4,
            sentence_len: 5,
            summary_sentences: 2,
            extractive_prob: 0.5,
            halluc_rate: 0.1,
            selection: SentenceSelection::Lead,
            seed: 0,
        }
    }
}

fn check_prob(field: &'static str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(CorpusError::Config {
            field,
            reason: format!("{v} is outside [0, 1]"),
        });
    }
    Ok(())
}

fn check_count(field: &'static str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(CorpusError::Config {
            field,
            reason: "must be at least 1".into(),
        });
    }
    Ok(())
}

impl SynthConfig {
    /// Mostly paraphrased summaries with noisy references.
    pub fn xsum_like() -> Self {
        Self {
            extractive_prob: 0.05,
            halluc_rate: 0.3,
            ..Self::default()
        }
    }

    /// Mostly extractive summaries with clean references.
    pub fn cnndm_like() -> Self {
        Self {
            extractive_prob: 0.85,
            halluc_rate: 0.02,
            ..Self::default()
        }
    }

    pub fn mediasum_like() -> Self {
        Self {
            extractive_prob: 0.6,
            halluc_rate: 0.05,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "xsum-like" => Some(Self::xsum_like()),
            "cnndm-like" => Some(Self::cnndm_like()),
            "mediasum-like" => Some(Self::mediasum_like()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_count("synth.n_examples", self.n_examples)?;
        check_count("synth.article_sentences", self.article_sentences)?;
        check_count("synth.sentence_len", self.sentence_len)?;
        check_count("synth.summary_sentences", self.summary_sentences)?;
        check_prob("synth.extractive_prob", self.extractive_prob)?;
        check_prob("synth.halluc_rate", self.halluc_rate)?;
        if self.summary_sentences > self.article_sentences {
            return Err(CorpusError::Config {
                field: "synth.summary_sentences",
                reason: format!(
                    "{} summary sentences need as many distinct article sentences, got {}",
                    self.summary_sentences, self.article_sentences
                ),
            });
        }
        if self.sentence_len < 2 {
            return Err(CorpusError::Config {
                field: "synth.sentence_len",
                reason: "sentences need at least 2 tokens for bigram overlap".into(),
            });
        }
        Ok(())
    }

    /// Article length in tokens, separators included.
    pub fn article_len(&self) -> usize {
        self.article_sentences * self.sentence_len + self.article_sentences - 1
    }

    /// Reference length in tokens, BOS/EOS and separators included.
    pub fn reference_len(&self) -> usize {
        self.summary_sentences * self.sentence_len + self.summary_sentences + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub article: Vec<TokenId>,
    pub reference: Vec<TokenId>,
    pub labels: Vec<TokenLabel>,
    pub bigram_overlap: f64,
}

impl Example {
    pub fn new(
        article: Vec<TokenId>,
        reference: Vec<TokenId>,
        labels: Vec<TokenLabel>,
    ) -> Result<Self> {
        if labels.len() != reference.len() {
            return Err(CorpusError::Contract(format!(
                "{} labels for {} reference tokens",
                labels.len(),
                reference.len()
            )));
        }
        let bigram_overlap = ngram_overlap(&reference, &article, 2).unwrap_or(0.0);
        Ok(Self {
            article,
            reference,
            labels,
            bigram_overlap,
        })
    }
}

/// Generates `cfg.n_examples` examples from random stream 0 of `cfg.seed`.
pub fn synthesize_corpus(vocab: &Vocabulary, cfg: &SynthConfig) -> Result<Vec<Example>> {
    synthesize_split(vocab, cfg, 0, cfg.n_examples)
}

/// Generates `n` examples from an independent random stream of `cfg.seed`.
/// Distinct streams give disjoint-in-randomness splits of one corpus.
pub fn synthesize_split(
    vocab: &Vocabulary,
    cfg: &SynthConfig,
    stream: u64,
    n: usize,
) -> Result<Vec<Example>> {
    cfg.validate()?;
    let needed = cfg.article_sentences * cfg.sentence_len;
    if needed > vocab.article_pool as usize {
        return Err(CorpusError::Config {
            field: "vocab.article_pool",
            reason: format!(
                "{} distinct article tokens needed but the pool holds {}",
                needed, vocab.article_pool
            ),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    (0..n).map(|_| synth_one(vocab, cfg, &mut rng)).collect()
}

fn synth_one(vocab: &Vocabulary, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Example> {
    let pool = vocab.article_pool();
    let drawn = index::sample(rng, pool.len(), cfg.article_sentences * cfg.sentence_len);
    let sentences: Vec<Vec<TokenId>> = drawn
        .into_vec()
        .chunks(cfg.sentence_len)
        .map(|c| c.iter().map(|&i| pool.start + i as TokenId).collect())
        .collect();

    let mut article = Vec::with_capacity(cfg.article_len());
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            article.push(SEP);
        }
        article.extend_from_slice(s);
    }

    let chosen: Vec<usize> = match cfg.selection {
        SentenceSelection::Lead => (0..cfg.summary_sentences).collect(),
        SentenceSelection::Random => {
            let mut c = index::sample(rng, cfg.article_sentences, cfg.summary_sentences).into_vec();
            c.sort_unstable();
            c
        }
    };

    let mut reference = vec![BOS];
    let mut labels = vec![TokenLabel::Special];
    for (k, &si) in chosen.iter().enumerate() {
        if k > 0 {
            reference.push(SEP);
            labels.push(TokenLabel::Special);
        }
        let copy = rng.random_bool(cfg.extractive_prob);
        for &t in &sentences[si] {
            if copy {
                reference.push(t);
                labels.push(TokenLabel::Copied);
            } else {
                reference.push(vocab.paraphrase(t).expect("article token is in the pool"));
                labels.push(TokenLabel::Paraphrased);
            }
        }
    }
    reference.push(EOS);
    labels.push(TokenLabel::Special);

    let halluc = vocab.halluc_ids();
    for (t, l) in reference.iter_mut().zip(labels.iter_mut()) {
        if *l == TokenLabel::Special {
            continue;
        }
        if rng.random_bool(cfg.halluc_rate) {
            *t = rng.random_range(halluc.clone());
            *l = TokenLabel::Hallucinated;
        }
    }
    Example::new(article, reference, labels)
}

/// Indices of the top and bottom `ceil(n/4)` examples by bigram overlap.
///
/// Sorting is descending by overlap and stable, so ties keep index order; the
/// bottom quartile is the tail of that order.
pub fn overlap_quartiles(overlaps: &[f64]) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = overlaps.len();
    if n < 4 {
        return Err(CorpusError::Contract(format!(
            "overlap quartiles need at least 4 examples, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| overlaps[b].total_cmp(&overlaps[a]));
    let k = n.div_ceil(4);
    Ok((order[..k].to_vec(), order[n - k..].to_vec()))
}

pub fn example_quartiles(examples: &[Example]) -> Result<(Vec<usize>, Vec<usize>)> {
    let o: Vec<f64> = examples.iter().map(|e| e.bigram_overlap).collect();
    overlap_quartiles(&o)
}

const CACHE_MAGIC: &[u8; 4] = b"TLCX";
const CACHE_VERSION: u32 = 1;

pub fn write_cache(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_cache(examples))?;
    w.flush()?;
    Ok(())
}

pub fn encode_cache(examples: &[Example]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(examples.len() as u64).to_le_bytes());
    for e in examples {
        for seq in [&e.article, &e.reference] {
            out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
            for &t in seq.iter() {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        out.extend(e.labels.iter().map(|&l| l as u8));
    }
    out
}

pub fn read_cache(path: &Path) -> Result<Vec<Example>> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    decode_cache(&buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CorpusError::Format(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn ids(&mut self) -> Result<Vec<TokenId>> {
        let n = self.u32()? as usize;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| {
            CorpusError::Format("sequence length overflow".into())
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_cache(buf: &[u8]) -> Result<Vec<Example>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != CACHE_MAGIC {
        return Err(CorpusError::Format("bad magic, not a corpus cache".into()));
    }
    let version = c.u32()?;
    if version != CACHE_VERSION {
        return Err(CorpusError::Format(format!(
            "unsupported version {version} (expected {CACHE_VERSION})"
        )));
    }
    let n = c.u64()?;
    let mut out = Vec::new();
    for i in 0..n {
        let article = c.ids()?;
        let reference = c.ids()?;
        let labels = c
            .take(reference.len())?
            .iter()
            .map(|&b| {
                TokenLabel::from_u8(b)
                    .ok_or_else(|| CorpusError::Format(format!("example {i}: bad label {b}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Example::new(article, reference, labels)?);
    }
    if c.pos != buf.len() {
        return Err(CorpusError::Format(format!(
            "{} trailing bytes",
            buf.len() - c.pos
        )));
    }
    Ok(out)
}

/// String-to-id table built while ingesting whitespace-tokenized text.
#[derive(Debug, Clone, Default)]
pub struct TokenTable {
    ids: HashMap<String, TokenId>,
    words: Vec<String>,
}

impl TokenTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, word: &str) -> TokenId {
        if let Some(&id) = self.ids.get(word) {
            return id;
        }
        let id = SPECIAL_COUNT + self.words.len() as TokenId;
        self.words.push(word.to_string());
        self.ids.insert(word.to_string(), id);
        id
    }

    pub fn tokenize(&mut self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.intern(w)).collect()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        id.checked_sub(SPECIAL_COUNT)
            .and_then(|i| self.words.get(i as usize))
            .map(String::as_str)
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter_map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

impl SupportOracle for TokenTable {
    fn supported(&self, token: TokenId, article: &[TokenId]) -> bool {
        is_special(token) || article.contains(&token)
    }

    fn is_sentence_end(&self, token: TokenId) -> bool {
        self.word(token)
            .is_some_and(|w| w.ends_with(['.', '!', '?']))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextRecord {
    pub article: Vec<TokenId>,
    pub reference: Vec<TokenId>,
    pub generated: Option<Vec<TokenId>>,
    pub step: Option<u64>,
    /// 1-based source line.
    pub line: usize,
}

#[derive(Deserialize)]
struct RawRecord {
    article: Option<serde_json::Value>,
    reference: Option<serde_json::Value>,
    generated: Option<serde_json::Value>,
    step: Option<serde_json::Value>,
}

fn text_field(
    v: Option<serde_json::Value>,
    field: &'static str,
    line: usize,
) -> Result<Option<String>> {
    match v {
        None | Some(serde_json::Value::Null) => Ok(None),
        Some(serde_json::Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(CorpusError::Parse {
            line,
            reason: format!("field `{field}` must be a string"),
        }),
    }
}

/// Parses line-delimited JSON records `{article, reference, generated?, step?}`.
/// Blank lines are skipped.
pub fn ingest_reader<R: BufRead>(reader: R) -> Result<(TokenTable, Vec<TextRecord>)> {
    let mut table = TokenTable::new();
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            reason: e.to_string(),
        })?;
        let article = text_field(raw.article, "article", line_no)?.ok_or(
            CorpusError::MissingField {
                field: "article",
                line: line_no,
            },
        )?;
        let reference = text_field(raw.reference, "reference", line_no)?.ok_or(
            CorpusError::MissingField {
                field: "reference",
                line: line_no,
            },
        )?;
        let generated = text_field(raw.generated, "generated", line_no)?;
        let step = match raw.step {
            None | Some(serde_json::Value::Null) => None,
            Some(v) => Some(v.as_u64().ok_or_else(|| CorpusError::Parse {
                line: line_no,
                reason: "field `step` must be a non-negative integer".into(),
            })?),
        };
        records.push(TextRecord {
            article: table.tokenize(&article),
            reference: table.tokenize(&reference),
            generated: generated.map(|g| table.tokenize(&g)),
            step,
            line: line_no,
        });
    }
    Ok((table, records))
}

pub fn ingest_triples(path: &Path) -> Result<(TokenTable, Vec<TextRecord>)> {
    ingest_reader(BufReader::new(File::open(path)?))
}
