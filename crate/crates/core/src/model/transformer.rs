use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, Result};
use crate::tensor::{AttnLayout, Tape, Tensor, Var};
use crate::token::{TokenId, BOS, EOS, PAD};

/// A parameter tensor with its manifest name.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone, Copy)]
struct FfIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncLayerIdx {
    attn_norm: NormIdx,
    attn: AttnIdx,
    ff_norm: NormIdx,
    ff: FfIdx,
}

#[derive(Debug, Clone, Copy)]
struct DecLayerIdx {
    self_norm: NormIdx,
    self_attn: AttnIdx,
    cross_norm: NormIdx,
    cross_attn: AttnIdx,
    ff_norm: NormIdx,
    ff: FfIdx,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: usize,
    enc: Vec<EncLayerIdx>,
    enc_norm: NormIdx,
    dec: Vec<DecLayerIdx>,
    dec_norm: NormIdx,
    out_w: usize,
    out_b: usize,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<NamedParam>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => (0..n)
                .map(|_| (self.rng.random::<f64>() * 2.0 - 1.0) * bound)
                .collect(),
        };
        let tensor = Tensor::new(shape, data)
            .expect("finite init")
            .with_grad();
        self.params.push(NamedParam { name, tensor });
        self.params.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIdx {
        NormIdx {
            gain: self.push(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.push(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        let b = 1.0 / (d as f64).sqrt();
        AttnIdx {
            wq: self.push(format!("{prefix}.wq"), vec![d, d], Init::Uniform(b)),
            wk: self.push(format!("{prefix}.wk"), vec![d, d], Init::Uniform(b)),
            wv: self.push(format!("{prefix}.wv"), vec![d, d], Init::Uniform(b)),
            wo: self.push(format!("{prefix}.wo"), vec![d, d], Init::Uniform(b)),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, f: usize) -> FfIdx {
        FfIdx {
            w1: self.push(
                format!("{prefix}.w1"),
                vec![d, f],
                Init::Uniform(1.0 / (d as f64).sqrt()),
            ),
            b1: self.push(format!("{prefix}.b1"), vec![f], Init::Zeros),
            w2: self.push(
                format!("{prefix}.w2"),
                vec![f, d],
                Init::Uniform(1.0 / (f as f64).sqrt()),
            ),
            b2: self.push(format!("{prefix}.b2"), vec![d], Init::Zeros),
        }
    }
}

enum Init {
    Zeros,
    Ones,
    Uniform(f64),
}

/// Pre-norm transformer encoder-decoder with a shared token embedding,
/// sinusoidal positions and an untied output projection.
///
/// Parameters live in a fixed manifest order (see [`Seq2SeqModel::params`]);
/// that order is also the checkpoint serialization order.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    config: ModelConfig,
    params: Vec<NamedParam>,
    layout: Layout,
    positions: Vec<f64>,
}

/// Parameter leaves attached to one tape, in manifest order.
#[derive(Debug, Clone)]
pub struct ParamVars(pub Vec<Var>);

/// Encoder output for a padded batch of articles.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub memory: Var,
    pub lens: Vec<usize>,
    pub width: usize,
}

/// Teacher-forced losses for a padded batch: position `j` of example `b`
/// lives at `b * width + j` and is valid for `j < lens[b]`.
#[derive(Debug, Clone)]
pub struct TeacherForced {
    pub nll: Var,
    pub width: usize,
    pub lens: Vec<usize>,
}

impl TeacherForced {
    pub fn valid_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.width * self.lens.len()];
        for (b, &n) in self.lens.iter().enumerate() {
            m[b * self.width..b * self.width + n].fill(true);
        }
        m
    }
}

/// Per-reference-token losses and probabilities, aligned with
/// `reference[1..]`. `probs[j] == exp(-losses[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScores {
    pub losses: Vec<f64>,
    pub probs: Vec<f64>,
}

fn sinusoidal(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

fn ids_of(tokens: &[TokenId]) -> impl Iterator<Item = usize> + '_ {
    tokens.iter().map(|&t| t as usize)
}

impl Seq2SeqModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params: Vec::new(),
        };
        // A lookup row has fan-in 1.
        let embed = b.push("embed.tokens".into(), vec![config.vocab_size, d], Init::Uniform(1.0));
        let enc = (0..config.n_enc_layers)
            .map(|l| EncLayerIdx {
                attn_norm: b.norm(&format!("enc.{l}.attn_norm"), d),
                attn: b.attn(&format!("enc.{l}.attn"), d),
                ff_norm: b.norm(&format!("enc.{l}.ff_norm"), d),
                ff: b.ff(&format!("enc.{l}.ff"), d, config.d_ff),
            })
            .collect();
        let enc_norm = b.norm("enc.final_norm", d);
        let dec = (0..config.n_dec_layers)
            .map(|l| DecLayerIdx {
                self_norm: b.norm(&format!("dec.{l}.self_norm"), d),
                self_attn: b.attn(&format!("dec.{l}.self_attn"), d),
                cross_norm: b.norm(&format!("dec.{l}.cross_norm"), d),
                cross_attn: b.attn(&format!("dec.{l}.cross_attn"), d),
                ff_norm: b.norm(&format!("dec.{l}.ff_norm"), d),
                ff: b.ff(&format!("dec.{l}.ff"), d, config.d_ff),
            })
            .collect();
        let dec_norm = b.norm("dec.final_norm", d);
        let out_w = b.push(
            "out.weight".into(),
            vec![d, config.vocab_size],
            Init::Uniform(1.0 / (d as f64).sqrt()),
        );
        let out_b = b.push("out.bias".into(), vec![config.vocab_size], Init::Zeros);
        let positions = sinusoidal(config.max_src_len.max(config.max_tgt_len), d);
        let model = Self {
            params: b.params,
            layout: Layout {
                embed,
                enc,
                enc_norm,
                dec,
                dec_norm,
                out_w,
                out_b,
            },
            positions,
            config,
        };
        debug_assert_eq!(model.num_scalars(), model.config.param_count());
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn manifest(&self) -> Vec<(&str, &[usize])> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), p.tensor.shape()))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Zeroes the output projection so every next-token distribution is
    /// uniform.
    pub fn zero_output_projection(&mut self) {
        for idx in [self.layout.out_w, self.layout.out_b] {
            let t = &mut self.params[idx].tensor;
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Copies parameter values from `other`, which must share the manifest.
    pub fn copy_params_from(&mut self, other: &Seq2SeqModel) -> Result<()> {
        if self.manifest() != other.manifest() {
            return Err(ModelError::Contract("parameter manifests differ".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.tensor.assign(src.tensor.data())?;
        }
        Ok(())
    }

    pub fn attach<'a>(&'a self, tape: &mut Tape<'a>) -> ParamVars {
        ParamVars(self.params.iter().map(|p| tape.leaf(&p.tensor)).collect())
    }

    fn embed_with_positions(
        &self,
        tape: &mut Tape<'_>,
        pv: &ParamVars,
        seqs: &[&[TokenId]],
        width: usize,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let mut ids = Vec::with_capacity(seqs.len() * width);
        let mut pos = Vec::with_capacity(seqs.len() * width * d);
        for s in seqs {
            ids.extend(ids_of(s));
            ids.extend(std::iter::repeat(PAD as usize).take(width - s.len()));
            pos.extend_from_slice(&self.positions[..width * d]);
        }
        let emb = tape.embedding(pv.0[self.layout.embed], &ids)?;
        let pe = tape.constant(vec![seqs.len() * width, d], pos)?;
        Ok(tape.add(emb, pe)?)
    }

    fn norm(&self, tape: &mut Tape<'_>, pv: &ParamVars, x: Var, idx: NormIdx) -> Result<Var> {
        Ok(tape.layer_norm(x, pv.0[idx.gain], pv.0[idx.bias])?)
    }

    fn attention(
        &self,
        tape: &mut Tape<'_>,
        pv: &ParamVars,
        xq: Var,
        xkv: Var,
        idx: AttnIdx,
        layout: AttnLayout,
    ) -> Result<Var> {
        let q = tape.matmul(xq, pv.0[idx.wq])?;
        let k = tape.matmul(xkv, pv.0[idx.wk])?;
        let v = tape.matmul(xkv, pv.0[idx.wv])?;
        let o = tape.attention(q, k, v, layout)?;
        Ok(tape.matmul(o, pv.0[idx.wo])?)
    }

    fn feed_forward(&self, tape: &mut Tape<'_>, pv: &ParamVars, x: Var, idx: FfIdx) -> Result<Var> {
        let h = tape.matmul(x, pv.0[idx.w1])?;
        let h = tape.add_bias(h, pv.0[idx.b1])?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, pv.0[idx.w2])?;
        Ok(tape.add_bias(h, pv.0[idx.b2])?)
    }

    fn check_article(&self, a: &[TokenId]) -> Result<()> {
        if a.is_empty() {
            return Err(ModelError::Contract("empty article".into()));
        }
        if a.len() > self.config.max_src_len {
            return Err(ModelError::Length {
                what: "article",
                len: a.len(),
                max: self.config.max_src_len,
            });
        }
        Ok(())
    }

    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        pv: &ParamVars,
        articles: &[&[TokenId]],
    ) -> Result<Encoded> {
        if articles.is_empty() {
            return Err(ModelError::Contract("empty batch".into()));
        }
        for a in articles {
            self.check_article(a)?;
        }
        let width = articles.iter().map(|a| a.len()).max().unwrap_or(1);
        let lens: Vec<usize> = articles.iter().map(|a| a.len()).collect();
        let layout = AttnLayout {
            batch: articles.len(),
            q_len: width,
            k_len: width,
            q_valid: lens.clone(),
            k_valid: lens.clone(),
            heads: self.config.n_heads,
            causal: false,
        };
        let mut h = self.embed_with_positions(tape, pv, articles, width)?;
        for layer in &self.layout.enc {
            let a = self.norm(tape, pv, h, layer.attn_norm)?;
            let a = self.attention(tape, pv, a, a, layer.attn, layout.clone())?;
            h = tape.add(h, a)?;
            let f = self.norm(tape, pv, h, layer.ff_norm)?;
            let f = self.feed_forward(tape, pv, f, layer.ff)?;
            h = tape.add(h, f)?;
        }
        let memory = self.norm(tape, pv, h, self.layout.enc_norm)?;
        Ok(Encoded {
            memory,
            lens,
            width,
        })
    }

    /// Next-token logits `[batch * width, vocab]` for decoder inputs `prefixes`
    /// (each starting with BOS), attending over `memory` row-for-row.
    pub fn decode_logits(
        &self,
        tape: &mut Tape<'_>,
        pv: &ParamVars,
        memory: &Encoded,
        prefixes: &[&[TokenId]],
    ) -> Result<(Var, usize)> {
        if prefixes.len() != memory.lens.len() {
            return Err(ModelError::Contract(
                "decoder batch does not match encoder batch".into(),
            ));
        }
        let max_in = self.config.max_tgt_len;
        for p in prefixes {
            if p.is_empty() {
                return Err(ModelError::Contract("empty decoder prefix".into()));
            }
            if p.len() > max_in {
                return Err(ModelError::Length {
                    what: "decoder input",
                    len: p.len(),
                    max: max_in,
                });
            }
        }
        let width = prefixes.iter().map(|p| p.len()).max().unwrap_or(1);
        let lens: Vec<usize> = prefixes.iter().map(|p| p.len()).collect();
        let heads = self.config.n_heads;
        let self_layout = AttnLayout {
            batch: prefixes.len(),
            q_len: width,
            k_len: width,
            q_valid: lens.clone(),
            k_valid: lens.clone(),
            heads,
            causal: true,
        };
        let cross_layout = AttnLayout {
            batch: prefixes.len(),
            q_len: width,
            k_len: memory.width,
            q_valid: lens,
            k_valid: memory.lens.clone(),
            heads,
            causal: false,
        };
        let mut h = self.embed_with_positions(tape, pv, prefixes, width)?;
        for layer in &self.layout.dec {
            let a = self.norm(tape, pv, h, layer.self_norm)?;
            let a = self.attention(tape, pv, a, a, layer.self_attn, self_layout.clone())?;
            h = tape.add(h, a)?;
            let c = self.norm(tape, pv, h, layer.cross_norm)?;
            let c = self.attention(
                tape,
                pv,
                c,
                memory.memory,
                layer.cross_attn,
                cross_layout.clone(),
            )?;
            h = tape.add(h, c)?;
            let f = self.norm(tape, pv, h, layer.ff_norm)?;
            let f = self.feed_forward(tape, pv, f, layer.ff)?;
            h = tape.add(h, f)?;
        }
        let h = self.norm(tape, pv, h, self.layout.dec_norm)?;
        let logits = tape.matmul(h, pv.0[self.layout.out_w])?;
        let logits = tape.add_bias(logits, pv.0[self.layout.out_b])?;
        Ok((logits, width))
    }

    fn check_reference(&self, r: &[TokenId]) -> Result<()> {
        if r.len() < 2 || r[0] != BOS || *r.last().unwrap() != EOS {
            return Err(ModelError::Contract(
                "reference must start with BOS, end with EOS and hold at least one token".into(),
            ));
        }
        // max_tgt_len counts predicted positions, i.e. the reference without BOS
        if r.len() - 1 > self.config.max_tgt_len {
            return Err(ModelError::Length {
                what: "reference targets",
                len: r.len() - 1,
                max: self.config.max_tgt_len,
            });
        }
        Ok(())
    }

    /// Shifted teacher forcing: position `j` predicts `reference[j + 1]` from
    /// `reference[..=j]` and the encoded article.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape<'_>,
        pv: &ParamVars,
        articles: &[&[TokenId]],
        references: &[&[TokenId]],
    ) -> Result<TeacherForced> {
        if articles.len() != references.len() {
            return Err(ModelError::Contract(
                "articles and references differ in count".into(),
            ));
        }
        for r in references {
            self.check_reference(r)?;
        }
        let memory = self.encode(tape, pv, articles)?;
        let inputs: Vec<&[TokenId]> = references.iter().map(|r| &r[..r.len() - 1]).collect();
        let (logits, width) = self.decode_logits(tape, pv, &memory, &inputs)?;
        let lens: Vec<usize> = inputs.iter().map(|p| p.len()).collect();
        let mut targets = vec![PAD as usize; width * references.len()];
        let mut valid = vec![false; targets.len()];
        for (b, r) in references.iter().enumerate() {
            for (j, &t) in r[1..].iter().enumerate() {
                targets[b * width + j] = t as usize;
                valid[b * width + j] = true;
            }
        }
        let nll = tape.per_token_nll(logits, &targets, &valid)?;
        Ok(TeacherForced { nll, width, lens })
    }

    /// Per-token losses and probabilities for a batch of (article, reference)
    /// pairs, without recording gradients.
    pub fn score_batch(
        &self,
        articles: &[&[TokenId]],
        references: &[&[TokenId]],
    ) -> Result<Vec<TokenScores>> {
        let mut tape = Tape::new();
        let pv = self.attach(&mut tape);
        let tf = self.teacher_forced(&mut tape, &pv, articles, references)?;
        let nll = tape.value(tf.nll);
        Ok(tf
            .lens
            .iter()
            .enumerate()
            .map(|(b, &n)| {
                let losses = nll[b * tf.width..b * tf.width + n].to_vec();
                let probs = losses.iter().map(|l| (-l).exp()).collect();
                TokenScores { losses, probs }
            })
            .collect())
    }

    pub fn forward_teacher_forced(
        &self,
        article: &[TokenId],
        reference: &[TokenId],
    ) -> Result<TokenScores> {
        Ok(self
            .score_batch(&[article], &[reference])?
            .pop()
            .expect("one example in, one out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            max_src_len: 10,
            max_tgt_len: 8,
            seed: 3,
        }
    }

    #[test]
    fn default_param_count_is_locked() {
        // embed 256*64 + 2 enc layers * 33216 + norm 128 + 2 dec layers * 49728
        // + norm 128 + out 64*256 + 256
        let cfg = ModelConfig::default();
        assert_eq!(cfg.param_count(), 199_168);
        let m = Seq2SeqModel::new(cfg).unwrap();
        assert_eq!(m.num_scalars(), 199_168);
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut m = Seq2SeqModel::new(tiny()).unwrap();
        m.zero_output_projection();
        let s = m
            .forward_teacher_forced(&[4, 5, 6], &[BOS, 7, 8, EOS])
            .unwrap();
        for (l, p) in s.losses.iter().zip(&s.probs) {
            assert!((l - 12f64.ln()).abs() < 1e-12);
            assert!((p - 1.0 / 12.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_over_length_and_malformed_reference() {
        let m = Seq2SeqModel::new(tiny()).unwrap();
        let long = vec![4; 11];
        assert!(matches!(
            m.forward_teacher_forced(&long, &[BOS, 5, EOS]),
            Err(ModelError::Length { what: "article", .. })
        ));
        assert!(matches!(
            m.forward_teacher_forced(&[4], &[5, 6, EOS]),
            Err(ModelError::Contract(_))
        ));
        let long_ref: Vec<TokenId> = std::iter::once(BOS)
            .chain(std::iter::repeat(5).take(8))
            .chain(std::iter::once(EOS))
            .collect();
        assert!(matches!(
            m.forward_teacher_forced(&[4], &long_ref),
            Err(ModelError::Length { .. })
        ));
    }

    #[test]
    fn manifest_names_are_unique_and_ordered() {
        let m = Seq2SeqModel::new(tiny()).unwrap();
        let names: Vec<&str> = m.manifest().iter().map(|(n, _)| *n).collect();
        assert_eq!(names.first(), Some(&"embed.tokens"));
        assert_eq!(names.last(), Some(&"out.bias"));
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }
}
