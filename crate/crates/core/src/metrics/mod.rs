//! Lexical, factuality and probability diagnostics, plus the trajectory record
//! format.

mod factual;
mod lexical;
mod probe;
mod records;
mod stats;

pub use factual::{sentence_error_rate, split_sentences, unsupported_counts, unsupported_token_rate};
pub use lexical::{ngram_overlap, rouge_n, RougeScore};
pub use probe::{
    aggregate, generate, probe_row, reference_token_probabilities, run_probe, Aggregates,
    LabelMeans, ProbeReport, ProbeRow, PROBE_CHUNK,
};
pub use records::{
    is_metric, read_csv, write_csv, write_rows, MetricRecord, Phase, CSV_HEADER, METRIC_NAMES,
};
pub use stats::{mean, summary_probability, BoxStats};

use thiserror::Error;

use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("metric `{metric}` at step {step} is not finite")]
    NonFinite { metric: String, step: u64 },
    #[error("trajectory csv line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
