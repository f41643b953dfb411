//! Analysis without training: recomputing probe rows of a run directory, or
//! scoring external (article, reference, generated) text triples.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use trunclab_core::corpus::{ingest_triples, overlap_quartiles, TextRecord, TokenTable};
use trunclab_core::metrics::{
    aggregate, mean, ngram_overlap, read_csv, rouge_n, sentence_error_rate, unsupported_counts,
    MetricRecord, Phase, ProbeReport,
};

use crate::run::{checkpoint_steps, probe_path, TRAJECTORY};

pub const EXTERNAL_SPLIT: &str = "external";

/// Outcome of re-deriving a run directory's probe rows from its saved
/// per-example probe reports.
pub struct RunAnalysis {
    pub rows: Vec<MetricRecord>,
    /// Probe rows of `trajectory.csv`, for comparison.
    pub recorded: Vec<MetricRecord>,
}

impl RunAnalysis {
    pub fn matches(&self) -> bool {
        self.rows == self.recorded
    }
}

/// Recomputes every probe aggregate from the per-example rows in `probes/`.
pub fn analyze_run(dir: &Path) -> Result<RunAnalysis> {
    let mut rows = Vec::new();
    for step in checkpoint_steps(dir)? {
        let path = probe_path(dir, step);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let reports: Vec<ProbeReport> =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        for mut report in reports {
            let overlaps: Vec<f64> = report
                .rows
                .iter()
                .map(|r| r.ref_overlap[1].unwrap_or(0.0))
                .collect();
            let quartiles = overlap_quartiles(&overlaps).ok();
            report.aggregates = aggregate(&report.rows, quartiles.as_ref());
            rows.extend(report.records());
        }
    }
    let traj = dir.join(TRAJECTORY);
    let file = fs::File::open(&traj).with_context(|| format!("reading {}", traj.display()))?;
    let recorded = read_csv(std::io::BufReader::new(file))?
        .into_iter()
        .filter(|r| r.phase == Phase::Probe)
        .collect();
    Ok(RunAnalysis { rows, recorded })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuartileReport {
    pub step: u64,
    pub examples: usize,
    pub subset_size: usize,
    /// Source line numbers of the highest reference bigram-overlap quarter.
    pub top: Vec<usize>,
    pub bottom: Vec<usize>,
}

pub struct TripleAnalysis {
    pub rows: Vec<MetricRecord>,
    pub quartiles: Vec<QuartileReport>,
    pub notices: Vec<String>,
}

fn push(rows: &mut Vec<MetricRecord>, step: u64, metric: &str, value: Option<f64>) {
    if let Some(v) = value {
        rows.push(
            MetricRecord::new(step, Phase::Probe, metric, EXTERNAL_SPLIT, v)
                .expect("analysis metrics are registered and finite"),
        );
    }
}

fn analyze_group(
    table: &TokenTable,
    step: u64,
    records: &[&TextRecord],
    out: &mut TripleAnalysis,
) {
    let rows = &mut out.rows;
    for n in 1..=4 {
        let m = mean(records.iter().filter_map(|r| ngram_overlap(&r.reference, &r.article, n)));
        push(rows, step, &format!("ref_overlap_{n}"), m);
    }
    let generated: Vec<(&TextRecord, &[u32])> = records
        .iter()
        .filter_map(|r| r.generated.as_deref().map(|g| (*r, g)))
        .collect();
    if generated.is_empty() {
        out.notices.push(format!(
            "step {step}: no `generated` text, so SER and generation metrics are skipped"
        ));
    } else {
        for n in 1..=4 {
            let m = mean(generated.iter().filter_map(|(r, g)| ngram_overlap(g, &r.article, n)));
            push(rows, step, &format!("overlap_{n}"), m);
        }
        push(rows, step, "rouge_1", mean(generated.iter().map(|(r, g)| rouge_n(g, &r.reference, 1).f1)));
        push(rows, step, "rouge_2", mean(generated.iter().map(|(r, g)| rouge_n(g, &r.reference, 2).f1)));
        push(
            rows,
            step,
            "ser",
            mean(generated.iter().filter_map(|(r, g)| sentence_error_rate(g, &r.article, table))),
        );
        let (bad, total) = generated
            .iter()
            .map(|(r, g)| unsupported_counts(g, &r.article, table))
            .fold((0, 0), |(b, t), (x, y)| (b + x, t + y));
        push(rows, step, "unsupported_rate", (total > 0).then(|| bad as f64 / total as f64));
        push(rows, step, "gen_len", mean(generated.iter().map(|(_, g)| g.len() as f64)));
    }
    let overlaps: Vec<f64> = records
        .iter()
        .map(|r| ngram_overlap(&r.reference, &r.article, 2).unwrap_or(0.0))
        .collect();
    match overlap_quartiles(&overlaps) {
        Ok((top, bottom)) => out.quartiles.push(QuartileReport {
            step,
            examples: records.len(),
            subset_size: top.len(),
            top: top.iter().map(|&i| records[i].line).collect(),
            bottom: bottom.iter().map(|&i| records[i].line).collect(),
        }),
        Err(_) => out.notices.push(format!(
            "step {step}: {} records are too few for overlap quartiles",
            records.len()
        )),
    }
}

/// Scores ingested triples, grouped by their `step` field (0 when absent).
pub fn analyze_triples(path: &Path) -> Result<TripleAnalysis> {
    let (table, records) = ingest_triples(path)?;
    let mut groups: BTreeMap<u64, Vec<&TextRecord>> = BTreeMap::new();
    for r in &records {
        groups.entry(r.step.unwrap_or(0)).or_default().push(r);
    }
    let mut out = TripleAnalysis {
        rows: Vec::new(),
        quartiles: Vec::new(),
        notices: Vec::new(),
    };
    if records.is_empty() {
        out.notices.push(format!("{} holds no records", path.display()));
    }
    for (step, group) in &groups {
        analyze_group(&table, *step, group, &mut out);
    }
    Ok(out)
}
