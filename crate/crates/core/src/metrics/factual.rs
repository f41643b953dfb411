use crate::corpus::SupportOracle;
use crate::token::{is_special, TokenId, EOS, SEP};

/// Splits a token sequence into sentences of content tokens. SEP and EOS close
/// a sentence, as does any token the oracle flags as a sentence end (that token
/// stays in its sentence). Other specials are dropped and empty sentences are
/// skipped.
pub fn split_sentences<O: SupportOracle + ?Sized>(
    tokens: &[TokenId],
    oracle: &O,
) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for &t in tokens {
        if t == SEP || t == EOS {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if t == EOS {
                break;
            }
            continue;
        }
        if is_special(t) {
            continue;
        }
        cur.push(t);
        if oracle.is_sentence_end(t) {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Fraction of generated sentences holding at least one unsupported token.
/// `None` when the generation has no content tokens.
pub fn sentence_error_rate<O: SupportOracle + ?Sized>(
    generated: &[TokenId],
    article: &[TokenId],
    oracle: &O,
) -> Option<f64> {
    let sentences = split_sentences(generated, oracle);
    if sentences.is_empty() {
        return None;
    }
    let bad = sentences
        .iter()
        .filter(|s| s.iter().any(|&t| !oracle.supported(t, article)))
        .count();
    Some(bad as f64 / sentences.len() as f64)
}

/// `(unsupported, total)` content-token counts of a generation.
pub fn unsupported_counts<O: SupportOracle + ?Sized>(
    generated: &[TokenId],
    article: &[TokenId],
    oracle: &O,
) -> (usize, usize) {
    let mut bad = 0;
    let mut total = 0;
    for &t in generated {
        if t == EOS {
            break;
        }
        if is_special(t) {
            continue;
        }
        total += 1;
        if !oracle.supported(t, article) {
            bad += 1;
        }
    }
    (bad, total)
}

pub fn unsupported_token_rate<O: SupportOracle + ?Sized>(
    generated: &[TokenId],
    article: &[TokenId],
    oracle: &O,
) -> Option<f64> {
    let (bad, total) = unsupported_counts(generated, article, oracle);
    (total > 0).then(|| bad as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{VocabConfig, Vocabulary};
    use crate::token::BOS;

    fn vocab() -> Vocabulary {
        Vocabulary::new(&VocabConfig {
            article_pool: 20,
            halluc_pool: 4,
        })
        .unwrap()
    }

    #[test]
    fn extractive_generation_has_no_errors() {
        let v = vocab();
        let article = [5, 6, 7, SEP, 8, 9];
        let gen = [BOS, 5, 6, SEP, 8, 9, EOS];
        assert_eq!(sentence_error_rate(&gen, &article, &v), Some(0.0));
        assert_eq!(unsupported_token_rate(&gen, &article, &v), Some(0.0));
    }

    #[test]
    fn one_of_four_sentences_bad() {
        let v = vocab();
        let h = v.halluc_ids().start;
        let article = [5, 6, 7, 8];
        let gen = [BOS, 5, SEP, 6, h, SEP, 7, SEP, 8, EOS];
        assert_eq!(sentence_error_rate(&gen, &article, &v), Some(0.25));
        assert_eq!(unsupported_token_rate(&gen, &article, &v), Some(0.2));
    }

    #[test]
    fn empty_generation_is_undefined() {
        let v = vocab();
        assert_eq!(sentence_error_rate(&[BOS, EOS], &[5], &v), None);
        assert_eq!(unsupported_token_rate(&[BOS, EOS], &[5], &v), None);
    }

    #[test]
    fn tokens_after_eos_are_ignored() {
        let v = vocab();
        let h = v.halluc_ids().start;
        assert_eq!(sentence_error_rate(&[BOS, 5, EOS, h], &[5], &v), Some(0.0));
        assert_eq!(unsupported_counts(&[BOS, 5, EOS, h], &[5], &v), (0, 1));
    }
}
