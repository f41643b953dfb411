//! Command-line driver: corpus synthesis, training with staged probes,
//! re-probing, analysis of external or recorded outputs, and report tables.

pub mod analyze;
pub mod config;
pub mod report;
pub mod run;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use trunclab_core::metrics::write_csv;

use crate::config::{ConfigError, ExperimentConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "trunclab",
    version,
    about = "Synthetic summarization experiments with loss truncation",
    after_help = "Exit codes: 0 success, 1 usage or config error, 2 runtime failure."
)]
pub struct Cli {
    /// Experiment config: a TOML file or a preset name (xsum-like, cnndm-like, ...)
    #[arg(long, global = true)]
    pub config: Option<String>,
    /// Output directory (run directory for synth, train and probe)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace the config's top-level seed
    #[arg(long, global = true)]
    pub seed_override: Option<u64>,
    /// Worker threads for probe evaluation
    #[arg(long, global = true, env = "TRUNCLAB_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the train and dev corpus caches into the output directory
    Synth,
    /// Train and probe at every stage; writes checkpoints, probes and trajectory.csv
    Train,
    /// Re-run the probe suite on the saved checkpoints of the run directory given by --out
    Probe {
        /// Add the beam probe (6 beams, length penalty 2, no repeated trigrams)
        #[arg(long)]
        beam: bool,
    },
    /// Recompute metrics without training, from a run directory or a JSON-lines triples file
    #[command(
        after_help = "For a run directory, writes analysis.csv and fails when it differs from the \
                      probe rows of trajectory.csv. For a triples file, writes analysis.csv and \
                      quartiles.json into --out (default: the file's directory)."
    )]
    Analyze {
        /// Run directory, or a file of {\"article\", \"reference\", \"generated\"?, \"step\"?} lines
        path: PathBuf,
    },
    /// Merge run trajectories into plot-ready tables
    #[command(after_help = report::tables_help())]
    Report {
        /// Completed run directories; each is labelled by its directory name
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let Some(spec) = &cli.config else {
        return Err(ConfigError("this command needs --config <file or preset>".into()).into());
    };
    let mut cfg = ExperimentConfig::load(spec)?;
    if let Some(seed) = cli.seed_override {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, fallback: impl FnOnce() -> PathBuf) -> PathBuf {
    cli.out.clone().unwrap_or_else(fallback)
}

fn write_records(path: &Path, rows: &[trunclab_core::metrics::MetricRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_csv(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

/// Runs one parsed command, writing human-readable progress to `log`.
pub fn execute(cli: &Cli, log: &mut dyn Write) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(ConfigError("invalid `--threads`: must be at least 1".into()).into());
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Synth => {
            let cfg = load_config(cli)?;
            let r = cfg.resolve()?;
            let dir = out_dir(cli, || PathBuf::from("runs").join(&r.config.name));
            fs::create_dir_all(&dir)?;
            fs::write(dir.join(run::SNAPSHOT), r.config.to_toml())?;
            let corpus = run::synthesize(&r)?;
            let m = run::write_corpus(&dir, &r, &corpus)?;
            writeln!(
                log,
                "wrote {} train and {} dev examples to {}",
                m.train.examples,
                m.dev.examples,
                dir.join("corpus").display()
            )?;
        }
        Command::Train => {
            let cfg = load_config(cli)?;
            let r = cfg.resolve()?;
            let dir = out_dir(cli, || PathBuf::from("runs").join(&r.config.name));
            let m = run::train_run(&r, &dir, |line| {
                let _ = writeln!(log, "{line}");
            })?;
            writeln!(log, "finished {} steps; run directory {}", m.total_steps, dir.display())?;
        }
        Command::Probe { beam } => {
            let Some(dir) = &cli.out else {
                return Err(ConfigError("probe needs --out <run directory>".into()).into());
            };
            let rows = run::reprobe(dir, *beam)?;
            let path = dir.join("reprobe.csv");
            write_records(&path, &rows)?;
            writeln!(log, "wrote {} rows to {}", rows.len(), path.display())?;
        }
        Command::Analyze { path } => {
            if !path.exists() {
                return Err(ConfigError(format!("{} does not exist", path.display())).into());
            }
            if path.is_dir() {
                let a = analyze::analyze_run(path)?;
                let out = out_dir(cli, || path.clone());
                fs::create_dir_all(&out)?;
                write_records(&out.join("analysis.csv"), &a.rows)?;
                if !a.matches() {
                    bail!(
                        "recomputed probe rows differ from {} ({} recomputed, {} recorded)",
                        path.join(run::TRAJECTORY).display(),
                        a.rows.len(),
                        a.recorded.len()
                    );
                }
                writeln!(log, "{} probe rows reproduced exactly", a.rows.len())?;
            } else {
                let a = analyze::analyze_triples(path)?;
                let out = out_dir(cli, || {
                    path.parent()
                        .filter(|p| !p.as_os_str().is_empty())
                        .map(Path::to_path_buf)
                        .unwrap_or_else(|| PathBuf::from("."))
                });
                fs::create_dir_all(&out)?;
                write_records(&out.join("analysis.csv"), &a.rows)?;
                run::write_json(&out.join("quartiles.json"), &a.quartiles)?;
                for n in &a.notices {
                    writeln!(log, "notice: {n}")?;
                }
                writeln!(log, "wrote {} rows to {}", a.rows.len(), out.join("analysis.csv").display())?;
            }
        }
        Command::Report { runs } => {
            let out = out_dir(cli, || PathBuf::from("report"));
            let r = report::write_report(runs, &out)?;
            for w in &r.warnings {
                writeln!(log, "warning: {w}")?;
            }
            for f in &r.files {
                writeln!(log, "wrote {}", f.display())?;
            }
        }
    }
    Ok(())
}

/// Maps an error to its exit code: configuration and usage problems are 1,
/// everything else (IO, divergence, mismatches) is 2.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.downcast_ref::<ConfigError>().is_some()) {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let mut stderr = std::io::stderr();
    match execute(&cli, &mut stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
