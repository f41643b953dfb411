use std::collections::HashMap;
use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trunclab_core::corpus::{Example, TokenLabel};
use trunclab_core::model::{
    beam_decode, beam_search, greedy_decode, greedy_decode_batch, greedy_search, DecodeConfig,
    ModelConfig, NextTokenScorer, Seq2SeqModel, Strategy,
};
use trunclab_core::tensor::Tape;
use trunclab_core::token::{TokenId, BOS, EOS, PAD, SEP};
use trunclab_core::trainer::{LrSchedule, TrainConfig, Trainer};

fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: 14,
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 2,
        n_dec_layers: 2,
        d_ff: 12,
        max_src_len: 9,
        max_tgt_len: 7,
        seed: 11,
    }
}

fn random_pair(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> (Vec<TokenId>, Vec<TokenId>) {
    let v = cfg.vocab_size as TokenId;
    let a_len = rng.random_range(1..=cfg.max_src_len);
    let article = (0..a_len).map(|_| rng.random_range(3..v)).collect();
    let r_len = rng.random_range(1..cfg.max_tgt_len);
    let mut reference = vec![BOS];
    reference.extend((0..r_len).map(|_| rng.random_range(3..v)));
    reference.push(EOS);
    (article, reference)
}

/// Per-example weighted loss; distinct weights make batch mixing visible.
fn weighted_loss(model: &Seq2SeqModel, arts: &[&[TokenId]], refs: &[&[TokenId]], w: &[f64]) -> f64 {
    model
        .score_batch(arts, refs)
        .unwrap()
        .iter()
        .zip(w)
        .map(|(s, w)| w * s.losses.iter().sum::<f64>())
        .sum()
}

#[test]
fn full_model_loss_passes_gradcheck_on_random_batch() {
    let cfg = small();
    let model = Seq2SeqModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pairs: Vec<_> = (0..3).map(|_| random_pair(&mut rng, &cfg)).collect();
    let arts: Vec<&[TokenId]> = pairs.iter().map(|p| p.0.as_slice()).collect();
    let refs: Vec<&[TokenId]> = pairs.iter().map(|p| p.1.as_slice()).collect();
    let w = [0.7, 1.3, 0.4];

    let grads = {
        let mut tape = Tape::new();
        let pv = model.attach(&mut tape);
        let tf = model.teacher_forced(&mut tape, &pv, &arts, &refs).unwrap();
        let mut tw = vec![0.0; tf.width * arts.len()];
        for (b, &n) in tf.lens.iter().enumerate() {
            tw[b * tf.width..b * tf.width + n].fill(w[b]);
        }
        let obj = tape.weighted_sum(tf.nll, &tw).unwrap();
        let g = tape.backward(obj).unwrap();
        pv.0.iter()
            .zip(model.params())
            .map(|(&v, p)| g.get(v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; p.tensor.numel()]))
            .collect::<Vec<_>>()
    };

    let h = 1e-6;
    let mut worst = (0.0f64, String::new());
    for (pi, p) in model.params().iter().enumerate() {
        let n = p.tensor.numel();
        for i in (0..n).step_by((n / 6).max(1)) {
            let mut plus = model.clone();
            plus.params_mut()[pi].tensor.data_mut()[i] += h;
            let mut minus = model.clone();
            minus.params_mut()[pi].tensor.data_mut()[i] -= h;
            let num = (weighted_loss(&plus, &arts, &refs, &w) - weighted_loss(&minus, &arts, &refs, &w)) / (2.0 * h);
            let a = grads[pi][i];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-4);
            if err > worst.0 {
                worst = (err, format!("{}[{i}] analytic {a} numeric {num}", p.name));
            }
        }
    }
    assert!(worst.0 <= 1e-4, "max relative error {:.3e} at {}", worst.0, worst.1);
}

#[test]
fn probabilities_are_exp_of_negative_losses() {
    let cfg = small();
    let model = Seq2SeqModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let (a, r) = random_pair(&mut rng, &cfg);
        let s = model.forward_teacher_forced(&a, &r).unwrap();
        assert_eq!(s.losses.len(), r.len() - 1);
        for (l, p) in s.losses.iter().zip(&s.probs) {
            assert!(((-l).exp() - p).abs() <= 1e-12);
            assert!(*l >= 0.0);
        }
    }
}

#[test]
fn batched_scores_equal_individual_scores() {
    let cfg = small();
    let model = Seq2SeqModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pairs: Vec<_> = (0..6).map(|_| random_pair(&mut rng, &cfg)).collect();
    let arts: Vec<&[TokenId]> = pairs.iter().map(|p| p.0.as_slice()).collect();
    let refs: Vec<&[TokenId]> = pairs.iter().map(|p| p.1.as_slice()).collect();
    let batched = model.score_batch(&arts, &refs).unwrap();
    let mut order: Vec<usize> = (0..6).collect();
    order.reverse();
    let ra: Vec<&[TokenId]> = order.iter().map(|&i| arts[i]).collect();
    let rr: Vec<&[TokenId]> = order.iter().map(|&i| refs[i]).collect();
    let reversed = model.score_batch(&ra, &rr).unwrap();
    for (i, (a, r)) in pairs.iter().enumerate() {
        let alone = model.forward_teacher_forced(a, r).unwrap();
        for (x, y) in alone.losses.iter().zip(&batched[i].losses) {
            assert!((x - y).abs() <= 1e-12, "example {i}: {x} vs {y}");
        }
        for (x, y) in alone.losses.iter().zip(&reversed[5 - i].losses) {
            assert!((x - y).abs() <= 1e-12, "example {i} reversed: {x} vs {y}");
        }
    }
}

fn overfit_one(steps: u64) -> (Seq2SeqModel, Example) {
    let article: Vec<TokenId> = vec![5, 9, 7, SEP, 11, 6, 8];
    let reference: Vec<TokenId> = vec![BOS, 9, 7, SEP, 12, 6, EOS];
    let labels = vec![TokenLabel::Special; reference.len()];
    let ex = Example::new(article, reference, labels).unwrap();
    let cfg = ModelConfig {
        vocab_size: 16,
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 32,
        max_src_len: 8,
        max_tgt_len: 8,
        seed: 1,
    };
    let tc = TrainConfig {
        total_steps: steps,
        batch_size: 1,
        learning_rate: 3e-3,
        lr_schedule: LrSchedule::Constant,
        checkpoint_every: steps,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(Seq2SeqModel::new(cfg).unwrap(), Arc::new(vec![ex.clone()]), tc).unwrap();
    t.run_until(steps, |_| Ok(())).unwrap();
    (t.into_model(), ex)
}

#[test]
fn overfitting_one_example_drives_loss_down_and_reproduces_it() {
    let (model, ex) = overfit_one(300);
    let s = model.forward_teacher_forced(&ex.article, &ex.reference).unwrap();
    let mean = s.losses.iter().sum::<f64>() / s.losses.len() as f64;
    assert!(mean < 0.05, "mean loss {mean}");
    let out = greedy_decode(&model, &ex.article, &DecodeConfig::greedy(8)).unwrap();
    assert_eq!(out.tokens, ex.reference[1..].to_vec());
    assert!(out.finished);
    let beam = beam_decode(&model, &ex.article, &DecodeConfig { no_repeat_ngram: 0, ..DecodeConfig::beam(8) }).unwrap();
    assert_eq!(beam.tokens, ex.reference[1..].to_vec());
}

#[test]
fn length_clamp_and_determinism() {
    let cfg = small();
    let model = Seq2SeqModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (a, _) = random_pair(&mut rng, &cfg);
        let l = rng.random_range(1..=cfg.max_tgt_len);
        let dc = DecodeConfig {
            min_len: l,
            max_len: l,
            ..DecodeConfig::greedy(l)
        };
        let out = greedy_decode(&model, &a, &dc).unwrap();
        assert_eq!(out.tokens.len(), l);
        assert!(out.tokens[..l - 1].iter().all(|&t| t != EOS));
        assert!(out.tokens.iter().all(|&t| t != PAD && t != BOS));
        let again = greedy_decode(&model, &a, &dc).unwrap();
        assert_eq!(out, again);
    }
}

#[test]
fn batched_greedy_matches_single_greedy() {
    let cfg = small();
    let model = Seq2SeqModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let arts: Vec<Vec<TokenId>> = (0..7).map(|_| random_pair(&mut rng, &cfg).0).collect();
    let refs: Vec<&[TokenId]> = arts.iter().map(|a| a.as_slice()).collect();
    let dc = DecodeConfig::greedy(cfg.max_tgt_len);
    let batch = greedy_decode_batch(&model, &refs, &dc).unwrap();
    for (a, b) in arts.iter().zip(&batch) {
        assert_eq!(&greedy_decode(&model, a, &dc).unwrap(), b);
    }
}

#[test]
fn beam_of_one_without_penalty_equals_greedy_on_model() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for seed in 0..10 {
        let model = Seq2SeqModel::new(ModelConfig { seed, ..cfg.clone() }).unwrap();
        let (a, _) = random_pair(&mut rng, &cfg);
        let g = greedy_decode(&model, &a, &DecodeConfig::greedy(cfg.max_tgt_len)).unwrap();
        let b = beam_decode(
            &model,
            &a,
            &DecodeConfig {
                num_beams: 1,
                length_penalty: 0.0,
                no_repeat_ngram: 0,
                ..DecodeConfig::beam(cfg.max_tgt_len)
            },
        )
        .unwrap();
        assert_eq!(g.tokens, b.tokens);
    }
}

/// Next-token distributions drawn at random per distinct prefix, so the
/// search tree is arbitrary but fixed.
struct TableScorer {
    vocab: usize,
    seed: u64,
    cache: std::sync::Mutex<HashMap<Vec<TokenId>, Vec<f64>>>,
}

impl TableScorer {
    fn new(vocab: usize, seed: u64) -> Self {
        Self {
            vocab,
            seed,
            cache: Default::default(),
        }
    }

    fn dist(&self, prefix: &[TokenId]) -> Vec<f64> {
        let mut cache = self.cache.lock().unwrap();
        cache
            .entry(prefix.to_vec())
            .or_insert_with(|| {
                let mut h = self.seed;
                for &t in prefix {
                    h = h.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(t as u64 + 1);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(h);
                let logits: Vec<f64> = (0..self.vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
                let z = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
                logits.iter().map(|l| l - z).collect()
            })
            .clone()
    }
}

impl NextTokenScorer for TableScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_log_probs(&self, requests: &[(usize, &[TokenId])]) -> trunclab_core::model::Result<Vec<Vec<f64>>> {
        Ok(requests.iter().map(|(_, p)| self.dist(p)).collect())
    }
}

fn repeats_ngram(seq: &[TokenId], n: usize) -> bool {
    if n == 0 || seq.len() < n {
        return false;
    }
    let grams: Vec<&[TokenId]> = seq.windows(n).collect();
    (0..grams.len()).any(|i| (i + 1..grams.len()).any(|j| grams[i] == grams[j]))
}

/// Best finished sequence by exhaustive enumeration under the beam scoring
/// rule, with ties to the shorter (earlier-finishing) then smaller sequence.
fn exhaustive_best(s: &TableScorer, cfg: &DecodeConfig) -> Vec<TokenId> {
    let mut best: Option<(f64, Vec<TokenId>)> = None;
    let mut frontier: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    for _ in 0..cfg.max_len {
        let mut next = Vec::new();
        for (hyp, lp) in &frontier {
            let mut prefix = vec![BOS];
            prefix.extend_from_slice(hyp);
            let dist = s.dist(&prefix);
            for t in 0..s.vocab as TokenId {
                if t == PAD || t == BOS || (t == EOS && hyp.len() < cfg.min_len) {
                    continue;
                }
                let mut seq = hyp.clone();
                seq.push(t);
                if repeats_ngram(&seq, cfg.no_repeat_ngram) {
                    continue;
                }
                let total = lp + dist[t as usize];
                if t == EOS {
                    let score = total / (seq.len() as f64).powf(cfg.length_penalty);
                    let better = match &best {
                        None => true,
                        Some((b, bs)) => score > *b || (score == *b && (seq.len(), &seq) < (bs.len(), bs)),
                    };
                    if better {
                        best = Some((score, seq));
                    }
                } else {
                    next.push((seq, total));
                }
            }
        }
        frontier = next;
    }
    best.expect("some sequence finishes").1
}

#[test]
fn wide_beam_matches_exhaustive_search() {
    for seed in 0..200 {
        let s = TableScorer::new(6, seed);
        for penalty in [0.0, 1.0, 2.0] {
            let cfg = DecodeConfig {
                strategy: Strategy::Beam,
                num_beams: 64,
                length_penalty: penalty,
                no_repeat_ngram: 0,
                min_len: 0,
                max_len: 3,
            };
            let got = beam_search(&s, 0, &cfg).unwrap();
            assert!(got.finished);
            assert_eq!(got.tokens, exhaustive_best(&s, &cfg), "seed {seed} penalty {penalty}");
        }
    }
}

#[test]
fn beam_of_one_equals_greedy_on_random_trees() {
    for seed in 0..200 {
        let s = TableScorer::new(6, seed);
        let g = greedy_search(&s, 1, &DecodeConfig::greedy(5)).unwrap().pop().unwrap();
        let b = beam_search(
            &s,
            0,
            &DecodeConfig {
                num_beams: 1,
                length_penalty: 0.0,
                no_repeat_ngram: 0,
                ..DecodeConfig::beam(5)
            },
        )
        .unwrap();
        assert_eq!(g.tokens, b.tokens, "seed {seed}");
    }
}

#[test]
fn beam_output_never_repeats_a_trigram() {
    for seed in 0..200 {
        // few non-special ids force the constraint to bind
        let s = TableScorer::new(6, 1000 + seed);
        let cfg = DecodeConfig {
            min_len: 10,
            ..DecodeConfig::beam(12)
        };
        let out = beam_search(&s, 0, &cfg).unwrap();
        assert!(!repeats_ngram(&out.tokens, 3), "seed {seed}: {:?}", out.tokens);
        let g = greedy_search(&s, 1, &DecodeConfig { no_repeat_ngram: 3, min_len: 10, ..DecodeConfig::greedy(12) })
            .unwrap()
            .pop()
            .unwrap();
        assert!(!repeats_ngram(&g.tokens, 3));
    }
}
