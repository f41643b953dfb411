use serde::{Deserialize, Serialize};

/// Five-number summary plus mean. Quartiles use linear interpolation between
/// order statistics (`h = (n - 1) p`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

fn interpolated(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Self {
            n: s.len(),
            min: s[0],
            q1: interpolated(&s, 0.25),
            median: interpolated(&s, 0.5),
            q3: interpolated(&s, 0.75),
            max: s[s.len() - 1],
            mean: s.iter().sum::<f64>() / s.len() as f64,
        })
    }
}

/// Geometric mean of token probabilities, computed from log-probabilities.
pub fn summary_probability(log_probs: &[f64]) -> Option<f64> {
    if log_probs.is_empty() {
        return None;
    }
    Some((log_probs.iter().sum::<f64>() / log_probs.len() as f64).exp())
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut n = 0usize;
    let mut s = 0.0;
    for v in values {
        n += 1;
        s += v;
    }
    (n > 0).then(|| s / n as f64)
}
