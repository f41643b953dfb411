//! Plot-ready comparison tables merged from one or more run directories.
//!
//! Every output is long format `run,step,split,metric,value`, so runs with
//! different probe schedules simply contribute different steps.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use trunclab_core::metrics::{read_csv, MetricRecord, Phase};

use crate::run::TRAJECTORY;

/// One plot-ready table: output file, caption and the (split, metric) pairs it holds.
pub struct FigureTable {
    pub file: &'static str,
    pub caption: &'static str,
    pub splits: &'static [&'static str],
    pub metrics: &'static [&'static str],
}

const GEN_SPLITS: &[&str] = &["dev", "dev_beam"];
const PROB_SPLITS: &[&str] = &["train", "dev"];

pub const TABLES: &[FigureTable] = &[
    FigureTable {
        file: "ngram_overlap.csv",
        caption: "n-gram overlap of generated summaries per stage; ref_overlap_n is the reference target line",
        splits: GEN_SPLITS,
        metrics: &[
            "overlap_1", "overlap_2", "overlap_3", "overlap_4",
            "ref_overlap_1", "ref_overlap_2", "ref_overlap_3", "ref_overlap_4",
        ],
    },
    FigureTable {
        file: "rouge.csv",
        caption: "ROUGE-1/2 of generated summaries per stage",
        splits: GEN_SPLITS,
        metrics: &["rouge_1", "rouge_2"],
    },
    FigureTable {
        file: "quartile_confidence.csv",
        caption: "summary-level probability box statistics of the top and bottom bigram-overlap quartiles",
        splits: PROB_SPLITS,
        metrics: &[
            "summary_prob_top_min", "summary_prob_top_q1", "summary_prob_top_median",
            "summary_prob_top_q3", "summary_prob_top_max", "summary_prob_top_mean",
            "summary_prob_bottom_min", "summary_prob_bottom_q1", "summary_prob_bottom_median",
            "summary_prob_bottom_q3", "summary_prob_bottom_max", "summary_prob_bottom_mean",
        ],
    },
    FigureTable {
        file: "sentence_error_rate.csv",
        caption: "sentence error rate of generated summaries per stage",
        splits: GEN_SPLITS,
        metrics: &["ser"],
    },
    FigureTable {
        file: "token_confidence.csv",
        caption: "mean reference-token probability by provenance label per stage",
        splits: PROB_SPLITS,
        metrics: &["prob_copied", "prob_paraphrased", "prob_hallucinated", "prob_factual"],
    },
    FigureTable {
        file: "abstractiveness.csv",
        caption: "bigram overlap of generations against the reference target, with the masked fraction at each stage",
        splits: &["dev", "dev_beam", "abstractiveness", "factuality", "sentence_factuality", "off"],
        metrics: &["overlap_2", "ref_overlap_2", "fraction_masked"],
    },
    FigureTable {
        file: "factuality.csv",
        caption: "factuality, ROUGE and abstractiveness of generations per stage",
        splits: GEN_SPLITS,
        metrics: &["ser", "unsupported_rate", "rouge_1", "overlap_2"],
    },
];

pub struct RunTrajectory {
    pub label: String,
    pub rows: Vec<MetricRecord>,
}

/// Reads a run's trajectory, labelled by the run directory's name.
pub fn load_run(dir: &Path) -> Result<RunTrajectory> {
    let path = dir.join(TRAJECTORY);
    if !path.exists() {
        bail!("{} has no {TRAJECTORY}; is it a completed run directory?", dir.display());
    }
    let rows = read_csv(BufReader::new(File::open(&path)?))
        .with_context(|| format!("reading {}", path.display()))?;
    if rows.is_empty() {
        bail!("{} holds no rows", path.display());
    }
    let label = dir
        .canonicalize()
        .ok()
        .and_then(|d| d.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunTrajectory { label, rows })
}

/// Distinct labels: duplicates get `#2`, `#3`, ... in argument order.
fn unique_labels(runs: &mut [RunTrajectory]) {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for r in runs.iter_mut() {
        let n = seen.entry(r.label.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            r.label = format!("{}#{}", r.label, n);
        }
    }
}

fn probe_steps(run: &RunTrajectory) -> BTreeSet<u64> {
    run.rows
        .iter()
        .filter(|r| r.phase == Phase::Probe)
        .map(|r| r.step)
        .collect()
}

pub struct ReportOutput {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn write_table(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "{header}")?;
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `comparison.csv` (every row of every run) and one table per plot
/// into `out`.
pub fn write_report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportOutput> {
    if run_dirs.is_empty() {
        bail!("report needs at least one run directory");
    }
    let mut runs = run_dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    unique_labels(&mut runs);
    let mut warnings = Vec::new();
    let reference = probe_steps(&runs[0]);
    for r in &runs[1..] {
        if probe_steps(r) != reference {
            warnings.push(format!(
                "probe steps of `{}` differ from `{}`; tables are outer-joined on step",
                r.label, runs[0].label
            ));
        }
    }
    fs::create_dir_all(out)?;
    let mut files = Vec::new();

    let path = out.join("comparison.csv");
    write_table(
        &path,
        "run,step,phase,metric,split,value",
        runs.iter().flat_map(|r| {
            r.rows.iter().map(move |x| {
                format!("{},{},{},{},{},{:?}", r.label, x.step, x.phase, x.metric, x.split, x.value)
            })
        }),
    )?;
    files.push(path);

    for fig in TABLES {
        let path = out.join(fig.file);
        // train-phase telemetry is kept only at probe stages
        write_table(
            &path,
            "run,step,split,metric,value",
            runs.iter().flat_map(|r| {
                let stages = probe_steps(r);
                r.rows
                    .iter()
                    .filter(move |x| {
                        fig.metrics.contains(&x.metric.as_str())
                            && fig.splits.contains(&x.split.as_str())
                            && (x.phase == Phase::Probe || stages.contains(&x.step))
                    })
                    .map(move |x| format!("{},{},{},{},{:?}", r.label, x.step, x.split, x.metric, x.value))
            }),
        )?;
        files.push(path);
    }
    Ok(ReportOutput { files, warnings })
}

/// Help text listing the report files.
pub fn tables_help() -> String {
    let mut s = String::from("Report outputs (long format run,step,split,metric,value):\n");
    s.push_str("  comparison.csv  every trajectory row of every run (run,step,phase,metric,split,value)\n");
    for f in TABLES {
        s.push_str(&format!("  {}  {}\n", f.file, f.caption));
    }
    s
}
