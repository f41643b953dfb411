use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::token::{is_special, strip_specials, TokenId};

fn ngrams(tokens: &[TokenId], n: usize) -> impl Iterator<Item = &[TokenId]> {
    tokens.windows(n)
}

/// N-grams within runs of content tokens; specials act as boundaries and never
/// appear in an n-gram.
fn segment_ngrams(tokens: &[TokenId], n: usize) -> HashSet<&[TokenId]> {
    tokens
        .split(|&t| is_special(t))
        .flat_map(|run| ngrams(run, n))
        .collect()
}

/// Fraction of the summary's distinct n-grams that also occur in the article.
///
/// Special tokens are stripped from both sides and n-grams do not cross
/// sentence separators. Each distinct summary n-gram counts once. Returns
/// `None` when the summary has no n-gram (or `n == 0`); callers exclude such
/// examples from aggregates.
pub fn ngram_overlap(summary: &[TokenId], article: &[TokenId], n: usize) -> Option<f64> {
    if n == 0 {
        return None;
    }
    let summary_set = segment_ngrams(summary, n);
    if summary_set.is_empty() {
        return None;
    }
    let article_set = segment_ngrams(article, n);
    let hits = summary_set.iter().filter(|g| article_set.contains(*g)).count();
    Some(hits as f64 / summary_set.len() as f64)
}

/// ROUGE-N precision, recall and F1 over token ids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when either side had fewer than `n` content tokens; scores are 0.
    pub degenerate: bool,
}

fn counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut m = HashMap::new();
    for g in ngrams(tokens, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Clipped n-gram overlap `O = sum_g min(c_cand(g), c_ref(g))`, with
/// `P = O / #cand`, `R = O / #ref` and `F1 = 2PR / (P + R)` (0 when `O = 0`).
pub fn rouge_n(candidate: &[TokenId], reference: &[TokenId], n: usize) -> RougeScore {
    let c = strip_specials(candidate);
    let r = strip_specials(reference);
    if n == 0 || c.len() < n || r.len() < n {
        return RougeScore {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            degenerate: true,
        };
    }
    let cc = counts(&c, n);
    let rc = counts(&r, n);
    let overlap: usize = cc
        .iter()
        .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
        .sum();
    let total_c = c.len() + 1 - n;
    let total_r = r.len() + 1 - n;
    if overlap == 0 {
        return RougeScore {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            degenerate: false,
        };
    }
    let p = overlap as f64 / total_c as f64;
    let rr = overlap as f64 / total_r as f64;
    // 2PR/(P+R) = 2O/(#cand + #ref); the count form is exactly symmetric.
    let f1 = 2.0 * overlap as f64 / (total_c + total_r) as f64;
    RougeScore {
        precision: p,
        recall: rr,
        f1,
        degenerate: false,
    }
}
