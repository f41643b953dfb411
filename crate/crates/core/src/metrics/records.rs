use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::MetricsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Probe,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Probe => "probe",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Phase::Train),
            "probe" => Some(Phase::Probe),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every metric name a [`MetricRecord`] may carry.
pub const METRIC_NAMES: &[&str] = &[
    // training telemetry
    "loss",
    "lr",
    "grad_norm",
    "tokens",
    "threshold",
    "fraction_masked",
    // generation probes
    "overlap_1",
    "overlap_2",
    "overlap_3",
    "overlap_4",
    "ref_overlap_1",
    "ref_overlap_2",
    "ref_overlap_3",
    "ref_overlap_4",
    "rouge_1",
    "rouge_2",
    "rouge_1_final",
    "ser",
    "unsupported_rate",
    "gen_len",
    // reference-token probability probes
    "prob_copied",
    "prob_paraphrased",
    "prob_hallucinated",
    "prob_factual",
    "summary_prob_top_min",
    "summary_prob_top_q1",
    "summary_prob_top_median",
    "summary_prob_top_q3",
    "summary_prob_top_max",
    "summary_prob_top_mean",
    "summary_prob_bottom_min",
    "summary_prob_bottom_q1",
    "summary_prob_bottom_median",
    "summary_prob_bottom_q3",
    "summary_prob_bottom_max",
    "summary_prob_bottom_mean",
];

pub fn is_metric(name: &str) -> bool {
    METRIC_NAMES.contains(&name)
}

/// One row of a trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub phase: Phase,
    pub metric: String,
    pub split: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(
        step: u64,
        phase: Phase,
        metric: &str,
        split: &str,
        value: f64,
    ) -> Result<Self, MetricsError> {
        if !is_metric(metric) {
            return Err(MetricsError::UnknownMetric(metric.to_string()));
        }
        if !value.is_finite() {
            return Err(MetricsError::NonFinite {
                metric: metric.to_string(),
                step,
            });
        }
        if split.is_empty() || split.contains([',', '\n', '"']) {
            return Err(MetricsError::Contract(format!("bad split name {split:?}")));
        }
        Ok(Self {
            step,
            phase,
            metric: metric.to_string(),
            split: split.to_string(),
            value,
        })
    }
}

pub const CSV_HEADER: &str = "step,phase,metric,split,value";

/// Writes rows without the header. Values use Rust's shortest round-trip
/// float formatting, so re-reading reproduces them exactly.
pub fn write_rows<W: Write>(w: &mut W, rows: &[MetricRecord]) -> std::io::Result<()> {
    for r in rows {
        writeln!(w, "{},{},{},{},{:?}", r.step, r.phase, r.metric, r.split, r.value)?;
    }
    Ok(())
}

pub fn write_csv<W: Write>(w: &mut W, rows: &[MetricRecord]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    write_rows(w, rows)
}

pub fn read_csv<R: BufRead>(r: R) -> Result<Vec<MetricRecord>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if i == 0 {
            if line.trim() != CSV_HEADER {
                return Err(MetricsError::Csv {
                    line: line_no,
                    reason: format!("expected header `{CSV_HEADER}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| MetricsError::Csv {
            line: line_no,
            reason,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", f.len())));
        }
        let step = f[0]
            .parse()
            .map_err(|_| bad(format!("bad step {:?}", f[0])))?;
        let phase = Phase::parse(f[1]).ok_or_else(|| bad(format!("bad phase {:?}", f[1])))?;
        let value: f64 = f[4]
            .parse()
            .map_err(|_| bad(format!("bad value {:?}", f[4])))?;
        let rec = MetricRecord::new(step, phase, f[2], f[3], value)
            .map_err(|e| bad(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_and_non_finite() {
        assert!(matches!(
            MetricRecord::new(1, Phase::Probe, "bleu", "dev", 0.5),
            Err(MetricsError::UnknownMetric(_))
        ));
        assert!(MetricRecord::new(1, Phase::Probe, "ser", "dev", f64::NAN).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = vec![
            MetricRecord::new(10, Phase::Train, "loss", "train", 0.1 + 0.2).unwrap(),
            MetricRecord::new(20, Phase::Probe, "rouge_1", "dev", 1.0 / 3.0).unwrap(),
            MetricRecord::new(20, Phase::Train, "threshold", "factuality", 1e-300).unwrap(),
        ];
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), rows);
    }
}
