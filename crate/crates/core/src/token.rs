//! Token ids and the reserved special tokens shared by every vocabulary.

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
/// Sentence separator.
pub const SEP: TokenId = 3;
pub const SPECIAL_COUNT: TokenId = 4;

pub fn is_special(t: TokenId) -> bool {
    t < SPECIAL_COUNT
}

/// Drops BOS/EOS/PAD/SEP, keeping content tokens in order.
pub fn strip_specials(tokens: &[TokenId]) -> Vec<TokenId> {
    tokens.iter().copied().filter(|&t| !is_special(t)).collect()
}
