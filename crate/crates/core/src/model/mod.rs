//! Small pre-norm transformer encoder-decoder and its decoding routines.

mod decode;
mod transformer;

pub use decode::{
    beam_decode, beam_search, greedy_decode, greedy_decode_batch, greedy_search, DecodeConfig,
    Decoded, ModelScorer, NextTokenScorer, Strategy,
};
pub use transformer::{Encoded, NamedParam, ParamVars, Seq2SeqModel, TeacherForced, TokenScores};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what} length {len} exceeds limit {max}")]
    Length {
        what: &'static str,
        len: usize,
        max: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture hyperparameters. The parameter count is a pure function of
/// these values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            max_src_len: 64,
            max_tgt_len: 24,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.vocab_size <= crate::token::SPECIAL_COUNT as usize {
            return bad("vocab_size must exceed the number of special tokens");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("d_model, n_heads and d_ff must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.max_src_len == 0 {
            return bad("max_src_len must be positive");
        }
        if self.max_tgt_len < 2 {
            return bad("max_tgt_len must be at least 2");
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let norm = 2 * d;
        let attn = 4 * d * d;
        let ff = d * f + f + f * d + d;
        let enc_layer = 2 * norm + attn + ff;
        let dec_layer = 3 * norm + 2 * attn + ff;
        v * d + self.n_enc_layers * enc_layer + norm + self.n_dec_layers * dec_layer + norm + d * v + v
    }
}
