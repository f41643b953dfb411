//! Token-level loss truncation: a streaming percentile threshold over recent
//! token losses and the per-token masks built from it, plus the example-level
//! variant that drops whole summaries by their mean loss.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TruncationError {
    #[error("invalid `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TruncationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationMode {
    Off,
    /// Drop low-loss tokens: keep `l > q`.
    Abstractiveness,
    /// Drop high-loss tokens: keep `l < q`.
    Factuality,
    /// Drop whole examples whose mean loss exceeds the example-score threshold.
    SentenceFactuality,
}

impl TruncationMode {
    pub fn name(self) -> &'static str {
        match self {
            TruncationMode::Off => "off",
            TruncationMode::Abstractiveness => "abstractiveness",
            TruncationMode::Factuality => "factuality",
            TruncationMode::SentenceFactuality => "sentence_factuality",
        }
    }
}

impl fmt::Display for TruncationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruncationConfig {
    pub mode: TruncationMode,
    /// Percentile in `[0, 100]`.
    pub percentile: f64,
    /// Plain training steps before masking starts.
    pub warmup_steps: u64,
    /// Number of recent token losses the threshold is computed over.
    pub window: usize,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            mode: TruncationMode::Off,
            percentile: 50.0,
            warmup_steps: 0,
            window: 10_000,
        }
    }
}

impl TruncationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.percentile) {
            return Err(TruncationError::Config {
                field: "truncation.percentile",
                reason: format!("{} is outside [0, 100]", self.percentile),
            });
        }
        if self.window == 0 {
            return Err(TruncationError::Config {
                field: "truncation.window",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// FIFO buffer of the most recent `capacity` values.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWindow {
    values: VecDeque<f64>,
    capacity: usize,
    seen: u64,
}

impl LossWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        Self {
            values: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
            seen: 0,
        }
    }

    /// Rebuilds a window from saved state; extra leading values are dropped.
    pub fn from_parts(capacity: usize, values: Vec<f64>, seen: u64) -> Self {
        let mut w = Self::new(capacity);
        let skip = values.len().saturating_sub(capacity);
        w.values.extend(&values[skip..]);
        w.seen = seen;
        w
    }

    pub fn push(&mut self, v: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(v);
        self.seen += 1;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of values ever pushed.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    /// Contents, oldest first.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied()
    }

    pub fn percentile(&self, p: f64) -> Option<f64> {
        let mut v: Vec<f64> = self.values.iter().copied().collect();
        percentile_in_place(&mut v, p)
    }
}

/// 1-based nearest rank `max(1, ceil(p/100 * n))`, clamped to `n`.
pub fn nearest_rank(n: usize, p: f64) -> usize {
    let r = (p / 100.0 * n as f64).ceil();
    (r.max(1.0) as usize).min(n)
}

/// Nearest-rank percentile; reorders `values`.
pub fn percentile_in_place(values: &mut [f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let r = nearest_rank(values.len(), p);
    let (_, v, _) = values.select_nth_unstable_by(r - 1, f64::total_cmp);
    Some(*v)
}

/// Pushes the batch's valid losses into the window, then returns the
/// nearest-rank `p`-th percentile of the window.
pub fn update_threshold_estimate(
    window: &mut LossWindow,
    losses: &[f64],
    valid: &[bool],
    p: f64,
) -> Result<f64> {
    if losses.len() != valid.len() {
        return Err(TruncationError::Contract(format!(
            "{} losses but {} validity flags",
            losses.len(),
            valid.len()
        )));
    }
    for (&l, &ok) in losses.iter().zip(valid) {
        if ok {
            window.push(l);
        }
    }
    window.percentile(p).ok_or_else(|| {
        TruncationError::Contract("threshold requested from an empty window".into())
    })
}

/// Per-token 0/1 weights. Invalid (pad) positions are always 0; with `t <= K`
/// or mode off every valid position is 1.
pub fn truncation_mask(
    losses: &[f64],
    valid: &[bool],
    q: f64,
    mode: TruncationMode,
    t: u64,
    warmup: u64,
) -> Result<Vec<f64>> {
    if losses.len() != valid.len() {
        return Err(TruncationError::Contract(format!(
            "{} losses but {} validity flags",
            losses.len(),
            valid.len()
        )));
    }
    let keep: fn(f64, f64) -> bool = if t <= warmup {
        |_, _| true
    } else {
        match mode {
            TruncationMode::Off => |_, _| true,
            TruncationMode::Abstractiveness => |l, q| l > q,
            TruncationMode::Factuality => |l, q| l < q,
            TruncationMode::SentenceFactuality => {
                return Err(TruncationError::Contract(
                    "token masks are not defined for the example-level mode".into(),
                ))
            }
        }
    };
    Ok(losses
        .iter()
        .zip(valid)
        .map(|(&l, &ok)| if ok && keep(l, q) { 1.0 } else { 0.0 })
        .collect())
}

pub fn apply_mask(losses: &[f64], mask: &[f64]) -> Result<Vec<f64>> {
    if losses.len() != mask.len() {
        return Err(TruncationError::Contract(format!(
            "{} losses but mask of length {}",
            losses.len(),
            mask.len()
        )));
    }
    Ok(losses.iter().zip(mask).map(|(l, m)| l * m).collect())
}

/// Example weights for the example-level variant. Each example's score is the
/// mean of its losses; scores enter `window` first, then each example gets
/// weight `1[score <= q_s]`.
pub fn sentence_level_mask(
    example_losses: &[&[f64]],
    p: f64,
    window: &mut LossWindow,
) -> Result<(Vec<f64>, f64)> {
    let mut scores = Vec::with_capacity(example_losses.len());
    for (i, l) in example_losses.iter().enumerate() {
        if l.is_empty() {
            return Err(TruncationError::Contract(format!(
                "example {i} has no scored tokens"
            )));
        }
        scores.push(l.iter().sum::<f64>() / l.len() as f64);
    }
    for &s in &scores {
        window.push(s);
    }
    let q = window.percentile(p).ok_or_else(|| {
        TruncationError::Contract("threshold requested from an empty window".into())
    })?;
    Ok((scores.iter().map(|&s| if s <= q { 1.0 } else { 0.0 }).collect(), q))
}

/// Mask and telemetry for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMask {
    pub mask: Vec<f64>,
    /// Token threshold, or the example-score threshold in the example-level mode.
    pub threshold: f64,
    /// Fraction of valid tokens with weight 0.
    pub fraction_masked: f64,
}

/// Stateful driver owned by the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Truncator {
    cfg: TruncationConfig,
    tokens: LossWindow,
    examples: LossWindow,
}

impl Truncator {
    pub fn new(cfg: TruncationConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            tokens: LossWindow::new(cfg.window),
            examples: LossWindow::new(cfg.window),
            cfg,
        })
    }

    pub fn config(&self) -> &TruncationConfig {
        &self.cfg
    }

    pub fn token_window(&self) -> &LossWindow {
        &self.tokens
    }

    pub fn example_window(&self) -> &LossWindow {
        &self.examples
    }

    pub fn restore(&mut self, tokens: LossWindow, examples: LossWindow) {
        self.tokens = tokens;
        self.examples = examples;
    }

    /// Builds the mask for step `t` over a row-major `[batch, width]` loss
    /// grid. Both windows are updated in every mode, including off, so runs
    /// that differ only in mode share state up to the warmup boundary. Every
    /// example needs at least one valid position.
    pub fn step(&mut self, t: u64, losses: &[f64], valid: &[bool], width: usize) -> Result<StepMask> {
        if width == 0 || losses.len() % width != 0 {
            return Err(TruncationError::Contract(format!(
                "loss grid of {} values is not a multiple of width {width}",
                losses.len()
            )));
        }
        let p = self.cfg.percentile;
        let q = update_threshold_estimate(&mut self.tokens, losses, valid, p)?;
        let per_example: Vec<Vec<f64>> = losses
            .chunks(width)
            .zip(valid.chunks(width))
            .map(|(l, v)| l.iter().zip(v).filter(|(_, &ok)| ok).map(|(&x, _)| x).collect())
            .collect();
        let refs: Vec<&[f64]> = per_example.iter().map(Vec::as_slice).collect();
        let (weights, qs) = sentence_level_mask(&refs, p, &mut self.examples)?;
        let (mask, threshold) = if self.cfg.mode == TruncationMode::SentenceFactuality {
            let active = t > self.cfg.warmup_steps;
            let mask = valid
                .iter()
                .enumerate()
                .map(|(i, &ok)| {
                    if !ok {
                        0.0
                    } else if active {
                        weights[i / width]
                    } else {
                        1.0
                    }
                })
                .collect();
            (mask, qs)
        } else {
            let mask = truncation_mask(losses, valid, q, self.cfg.mode, t, self.cfg.warmup_steps)?;
            (mask, q)
        };
        let n_valid = valid.iter().filter(|&&v| v).count();
        let kept: f64 = mask.iter().sum();
        let fraction_masked = if n_valid == 0 {
            0.0
        } else {
            1.0 - kept / n_valid as f64
        };
        Ok(StepMask {
            mask,
            threshold,
            fraction_masked,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window_of(vals: &[f64]) -> LossWindow {
        let mut w = LossWindow::new(10_000);
        for &v in vals {
            w.push(v);
        }
        w
    }

    #[test]
    fn nearest_rank_examples() {
        let w = window_of(&(1..=10).map(f64::from).collect::<Vec<_>>());
        assert_eq!(w.percentile(50.0), Some(5.0));
        assert_eq!(w.percentile(20.0), Some(2.0));
        assert_eq!(w.percentile(100.0), Some(10.0));
        assert_eq!(w.percentile(0.0), Some(1.0));
        assert_eq!(LossWindow::new(3).percentile(50.0), None);
    }

    #[test]
    fn window_is_fifo() {
        let mut w = LossWindow::new(3);
        for v in [1.0, 2.0, 3.0, 4.0, 5.0] {
            w.push(v);
        }
        assert_eq!(w.values().collect::<Vec<_>>(), vec![3.0, 4.0, 5.0]);
        assert_eq!(w.seen(), 5);
    }

    #[test]
    fn batch_enters_window_before_threshold() {
        let mut w = LossWindow::new(100);
        let q = update_threshold_estimate(&mut w, &[7.0, 0.0], &[true, false], 50.0).unwrap();
        assert_eq!(q, 7.0);
        assert_eq!(w.len(), 1);
        let mut empty = LossWindow::new(4);
        assert!(update_threshold_estimate(&mut empty, &[1.0], &[false], 50.0).is_err());
    }

    #[test]
    fn mask_indicators() {
        let l = [0.1, 0.9, 0.5];
        let v = [true; 3];
        let abs = truncation_mask(&l, &v, 0.4, TruncationMode::Abstractiveness, 5, 2).unwrap();
        assert_eq!(abs, vec![0.0, 1.0, 1.0]);
        let fac = truncation_mask(&l, &v, 0.4, TruncationMode::Factuality, 5, 2).unwrap();
        assert_eq!(fac, vec![1.0, 0.0, 0.0]);
        for mode in [TruncationMode::Abstractiveness, TruncationMode::Factuality] {
            assert_eq!(truncation_mask(&l, &v, 0.4, mode, 2, 2).unwrap(), vec![1.0; 3]);
        }
        let padded = truncation_mask(&l, &[true, true, false], 0.4, TruncationMode::Off, 9, 0).unwrap();
        assert_eq!(padded, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn threshold_ties_are_truncated_in_both_modes() {
        let l = [0.4];
        for mode in [TruncationMode::Abstractiveness, TruncationMode::Factuality] {
            assert_eq!(truncation_mask(&l, &[true], 0.4, mode, 1, 0).unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn apply_mask_cases() {
        let l = [0.1, 0.9, 0.5];
        assert_eq!(apply_mask(&l, &[1.0; 3]).unwrap(), l.to_vec());
        assert_eq!(apply_mask(&l, &[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert_eq!(apply_mask(&l, &[0.0, 1.0, 1.0]).unwrap(), vec![0.0, 0.9, 0.5]);
        assert!(apply_mask(&l, &[1.0]).is_err());
    }

    #[test]
    fn sentence_level_cases() {
        let mut w = LossWindow::new(100);
        let (m, q) = sentence_level_mask(&[&[3.0, 5.0]], 50.0, &mut w).unwrap();
        assert_eq!((m, q), (vec![1.0], 4.0));

        let mut w = LossWindow::new(100);
        let ex: [&[f64]; 4] = [&[1.0], &[2.0], &[3.0], &[4.0]];
        let (m, q) = sentence_level_mask(&ex, 50.0, &mut w).unwrap();
        assert_eq!(q, 2.0);
        assert_eq!(m, vec![1.0, 1.0, 0.0, 0.0]);

        let mut w = LossWindow::new(100);
        let (m, _) = sentence_level_mask(&ex, 100.0, &mut w).unwrap();
        assert_eq!(m, vec![1.0; 4]);
    }

    #[test]
    fn truncator_sentence_mode_expands_weights() {
        let mut t = Truncator::new(TruncationConfig {
            mode: TruncationMode::SentenceFactuality,
            percentile: 50.0,
            warmup_steps: 0,
            window: 100,
        })
        .unwrap();
        // two examples of width 3; the second has a pad
        let losses = [1.0, 1.0, 1.0, 5.0, 5.0, 0.0];
        let valid = [true, true, true, true, true, false];
        let s = t.step(1, &losses, &valid, 3).unwrap();
        assert_eq!(s.mask, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.threshold, 1.0);
        assert!((s.fraction_masked - 0.4).abs() < 1e-15);
    }

    #[test]
    fn config_validation_names_field() {
        let cfg = TruncationConfig {
            percentile: 120.0,
            ..TruncationConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("truncation.percentile"));
    }
}
