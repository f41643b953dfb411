use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trunclab_cli::config::ExperimentConfig;

const SMALL: &str = r#"
name = "small"
seed = 3

[vocab]
article_pool = 12
halluc_pool = 6

[synth]
n_examples = 48
article_sentences = 3
sentence_len = 3
summary_sentences = 2
extractive_prob = 0.5
halluc_rate = 0.2

[data]
dev_examples = 12

[model]
d_model = 8
n_heads = 2
n_enc_layers = 1
n_dec_layers = 1
d_ff = 16

[train]
total_steps = 12
batch_size = 4
learning_rate = 1e-3

[train.truncation]
mode = "factuality"
percentile = 50.0
warmup_steps = 6
window = 64

[decode]
extra_beam_probe = true

[probe]
size = 8
stages = 3
train_sample = 10
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_trunclab"));
    c.env_remove("TRUNCLAB_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path to bytes for every file below `root`, sorted.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_twice_writes_identical_caches() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--config", &cfg, "--out", s(&a)]);
    ok(&["synth", "--config", &cfg, "--out", s(&b)]);
    let ta = tree(&a);
    assert_eq!(ta, tree(&b));
    let names: Vec<_> = ta.iter().map(|(p, _)| p.to_string_lossy().into_owned()).collect();
    for f in ["config.snapshot", "corpus/train.tlcx", "corpus/dev.tlcx", "corpus/manifest.json"] {
        assert!(names.contains(&f.to_string()), "{f} missing from {names:?}");
    }
    let manifest = fs::read_to_string(a.join("corpus/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 3"), "{manifest}");

    // a different seed gives a different corpus
    let c = tmp.path().join("c");
    ok(&["synth", "--config", &cfg, "--out", s(&c), "--seed-override", "4"]);
    assert_ne!(
        fs::read(a.join("corpus/train.tlcx")).unwrap(),
        fs::read(c.join("corpus/train.tlcx")).unwrap()
    );
}

#[test]
fn shipped_presets_load_unchanged() {
    let c = ExperimentConfig::load("xsum-like").unwrap();
    assert_eq!(c.synth.extractive_prob, 0.05);
    assert_eq!(c.synth.halluc_rate, 0.3);
    let r = c.resolve().unwrap();
    assert_eq!(r.train.checkpoint_steps().len(), 10);
    assert_eq!(r.config.probe.size, 800);

    let f = ExperimentConfig::load("xsum-like-factuality").unwrap().resolve().unwrap();
    let t = f.train.truncation;
    assert_eq!((f.train.total_steps, t.warmup_steps, t.percentile), (10000, 5000, 50.0));
    let a = ExperimentConfig::load("cnndm-like-abstractive").unwrap().resolve().unwrap();
    let t = a.train.truncation;
    assert_eq!((a.train.total_steps, t.warmup_steps, t.percentile), (8000, 3000, 20.0));

    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--config", "no-such-preset", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_alpha_exits_with_config_error_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, SMALL.replace("extractive_prob = 0.5", "extractive_prob = 1.5")).unwrap();
    let out = run(&["synth", "--config", s(&path), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("synth.extractive_prob"), "{err}");
    assert!(!tmp.path().join("o").join("corpus").exists());

    // unknown flag and missing config are usage errors
    assert_eq!(run(&["synth", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["synth"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("diverge.toml");
    fs::write(&path, SMALL.replace("learning_rate = 1e-3", "learning_rate = 1e300")).unwrap();
    let out = run(&["train", "--config", s(&path), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let junk = tmp.path().join("junk.jsonl");
    fs::write(&junk, "{not json}\n").unwrap();
    let out = run(&["analyze", s(&junk), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn train_analyze_probe_and_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let dir = tmp.path().join("run");
    ok(&["train", "--config", &cfg, "--out", s(&dir), "--threads", "1"]);

    let traj = fs::read_to_string(dir.join("trajectory.csv")).unwrap();
    let probe_steps: std::collections::BTreeSet<&str> = traj
        .lines()
        .filter(|l| l.contains(",probe,"))
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(probe_steps.into_iter().collect::<Vec<_>>(), ["12", "4", "8"]);
    for split in [",dev,", ",dev_beam,", ",train,"] {
        assert!(traj.contains(split), "{split}");
    }
    for step in [4, 8, 12] {
        assert!(dir.join(format!("checkpoints/step-{step}.ckpt")).exists());
        assert!(dir.join(format!("probes/step-{step}.json")).exists());
    }
    assert!(dir.join("manifest.json").exists());

    // training into a finished run directory is refused
    let again = run(&["train", "--config", &cfg, "--out", s(&dir)]);
    assert_eq!(again.status.code(), Some(1));

    // recomputation from saved probe rows reproduces the trajectory exactly
    let out_a = tmp.path().join("analysis");
    ok(&["analyze", s(&dir), "--out", s(&out_a)]);
    let rows = fs::read_to_string(out_a.join("analysis.csv")).unwrap();
    let probe_rows: Vec<&str> = traj.lines().filter(|l| l.contains(",probe,")).collect();
    assert_eq!(rows.lines().skip(1).collect::<Vec<_>>(), probe_rows);

    // re-probing the checkpoints reproduces the same rows
    let before = fs::read(dir.join("probes/step-8.json")).unwrap();
    ok(&["probe", "--out", s(&dir)]);
    let re = fs::read_to_string(dir.join("reprobe.csv")).unwrap();
    assert_eq!(re.lines().skip(1).collect::<Vec<_>>(), probe_rows);
    assert_eq!(fs::read(dir.join("probes/step-8.json")).unwrap(), before);

    // a tampered trajectory is detected
    fs::write(dir.join("trajectory.csv"), traj.replacen(",probe,rouge_1,dev,", ",probe,rouge_1,dev,1", 1))
        .unwrap();
    let bad = run(&["analyze", s(&dir), "--out", s(&out_a)]);
    assert_eq!(bad.status.code(), Some(2));
    fs::write(dir.join("trajectory.csv"), &traj).unwrap();

    // one run passes through with its label
    let rep = tmp.path().join("report");
    ok(&["report", s(&dir), "--out", s(&rep)]);
    let cmp = fs::read_to_string(rep.join("comparison.csv")).unwrap();
    let mut lines = cmp.lines();
    assert_eq!(lines.next(), Some("run,step,phase,metric,split,value"));
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), traj.lines().count() - 1);
    for (r, t) in body.iter().zip(traj.lines().skip(1)) {
        let (label, rest) = r.split_once(',').unwrap();
        assert_eq!(label, "run");
        assert_eq!(rest, t);
    }
    for f in [
        "ngram_overlap.csv",
        "rouge.csv",
        "quartile_confidence.csv",
        "sentence_error_rate.csv",
        "token_confidence.csv",
        "abstractiveness.csv",
        "factuality.csv",
    ] {
        let text = fs::read_to_string(rep.join(f)).unwrap();
        assert!(text.starts_with("run,step,split,metric,value\n"), "{f}");
        assert!(text.lines().count() > 1, "{f} is empty");
    }
    let abs = fs::read_to_string(rep.join("abstractiveness.csv")).unwrap();
    assert!(abs.contains(",ref_overlap_2,") && abs.contains(",overlap_2,"));
    assert!(abs.contains(",factuality,fraction_masked,"));
    // telemetry is kept only at probe stages
    assert!(abs.lines().skip(1).all(|l| ["4", "8", "12"].contains(&l.split(',').nth(1).unwrap())));
}

#[test]
fn report_rejects_empty_directories_and_warns_on_schedule_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = run(&["report", s(&empty), "--out", s(&tmp.path().join("rep"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trajectory.csv"));
    assert_eq!(run(&["report"]).status.code(), Some(1));

    let cfg = small_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["train", "--config", &cfg, "--out", s(&a)]);
    let other = tmp.path().join("other.toml");
    fs::write(&other, SMALL.replace("stages = 3", "stages = 2")).unwrap();
    ok(&["train", "--config", s(&other), "--out", s(&b)]);
    let out = ok(&["report", s(&a), s(&b), "--out", s(&tmp.path().join("rep"))]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("warning: probe steps"), "{err}");
    let text = fs::read_to_string(tmp.path().join("rep/rouge.csv")).unwrap();
    let steps = |label: &str| {
        text.lines()
            .filter(|l| l.starts_with(&format!("{label},")))
            .map(|l| l.split(',').nth(1).unwrap().to_string())
            .collect::<std::collections::BTreeSet<_>>()
    };
    assert_eq!(steps("a").into_iter().collect::<Vec<_>>(), ["12", "4", "8"]);
    assert_eq!(steps("b").into_iter().collect::<Vec<_>>(), ["12", "6"]);
}

#[test]
fn analyze_triples_without_generations_skips_ser() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("triples.jsonl");
    let mut lines = String::new();
    for i in 0..9 {
        lines.push_str(&format!(
            "{{\"article\": \"a{i} b c . d e f .\", \"reference\": \"a{i} b x{i} .\"}}\n"
        ));
    }
    fs::write(&path, lines).unwrap();
    let out_dir = tmp.path().join("out");
    let out = ok(&["analyze", s(&path), "--out", s(&out_dir)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("SER"));
    let rows = fs::read_to_string(out_dir.join("analysis.csv")).unwrap();
    assert!(rows.contains(",ref_overlap_1,external,"));
    assert!(!rows.contains(",ser,"));
    let q: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("quartiles.json")).unwrap()).unwrap();
    assert_eq!(q[0]["examples"], 9);
    assert_eq!(q[0]["subset_size"], 3);
    assert_eq!(q[0]["top"].as_array().unwrap().len(), 3);
}

#[test]
fn end_to_end_outputs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let mut trees = Vec::new();
    for name in ["x", "y"] {
        let root = tmp.path().join(name);
        let dir = root.join("run");
        ok(&["synth", "--config", &cfg, "--out", s(&dir)]);
        ok(&["train", "--config", &cfg, "--out", s(&dir)]);
        ok(&["report", s(&dir), "--out", s(&root.join("report"))]);
        trees.push(tree(&root));
    }
    assert!(!trees[0].is_empty());
    assert_eq!(trees[0], trees[1]);
}
