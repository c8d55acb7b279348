// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const SUBCOMMANDS: [&str; 10] = [
    "gen-data",
    "train-base",
    "trace",
    "edit",
    "eval",
    "in-domain",
    "ood",
    "ablate-layers",
    "ablate-positions",
    "report",
];

fn tracedit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tracedit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    o
}

/// Small enough that the whole pipeline runs in seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "corpus": { "per_domain": 60, "seed": 5 },
        "model": {
            "n_layers": 3, "n_heads": 2, "d_model": 16, "d_ff": 32, "vocab_size": 0,
            "max_seq": 64, "norm_eps": 1e-5, "init_seed": 0
        },
        "base": { "epochs": 6, "lr": 0.01, "min_accuracy": 0.0 },
        "experiment": {
            "seeds": [0],
            "edit": { "rank_w": 1, "rank_rep": 1, "train": { "epochs": 1, "batch_size": 8, "lr_w": 0.01, "lr_rep": 0.01 } }
        }
    });
    let path = dir.join("tiny.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

struct Pipeline {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    config: String,
}

impl Pipeline {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        let config = tiny_config(&dir).to_string_lossy().into_owned();
        let p = Pipeline { _tmp: tmp, dir, config };
        ok(p.run(&["gen-data", "--out", "c.jsonl"]));
        ok(p.run(&["train-base", "--corpus", "c.jsonl", "--out", "base.ckpt", "--subset", "plain"]));
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut all = vec!["--config", &self.config, "--out-dir", "out"];
        all.extend_from_slice(args);
        tracedit(&self.dir, &all)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.join("out").join(name)
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&fs::read_to_string(self.out(name)).unwrap()).unwrap()
    }
}

#[test]
fn help_on_every_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ok(tracedit(tmp.path(), &["--help"]));
    for sub in SUBCOMMANDS {
        assert!(stdout(&o).contains(sub), "top-level help lists {sub}");
        let o = ok(tracedit(tmp.path(), &[sub, "--help"]));
        assert!(stdout(&o).contains("Usage"), "{sub} --help prints usage");
    }
}

#[test]
fn unknown_subcommand_or_flag_exits_one_with_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tracedit(tmp.path(), &["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"));
    let o = tracedit(tmp.path(), &["gen-data", "--no-such-flag"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn bad_inputs_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = tracedit(d, &["train-base", "--corpus", "missing.jsonl"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("missing.jsonl"));

    let o = tracedit(d, &["edit", "--model", "m", "--corpus", "c", "--domain", "x", "--layers", "middle"]);
    assert_eq!(code(&o), 1);

    fs::write(d.join("bad.json"), r#"{"no_such_section": 1}"#).unwrap();
    let o = tracedit(d, &["--config", "bad.json", "gen-data"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));

    let o = tracedit(d, &["gen-data", "--per-domain", "0", "--out", "c.jsonl"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn gen_data_prints_counts_and_is_seeded() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = ok(tracedit(d, &["--seed", "1", "gen-data", "--out", "a.jsonl", "--per-domain", "50"]));
    let text = stdout(&o);
    for tag in ["restaurant", "laptop", "device", "service"] {
        assert!(text.lines().any(|l| l == format!("{tag}\t50")), "{text}");
    }
    assert!(text.contains("total\t200"));
    ok(tracedit(d, &["--seed", "1", "gen-data", "--out", "b.jsonl", "--per-domain", "50"]));
    ok(tracedit(d, &["--seed", "2", "gen-data", "--out", "c.jsonl", "--per-domain", "50"]));
    let read = |n: &str| fs::read(d.join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(d.join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["commands"]["gen-data"]["resolved"]["corpus"]["per_domain"], 50);
}

#[test]
fn pipeline_edit_eval_trace_and_reports() {
    let p = Pipeline::new();
    let base_before = fs::read(p.dir.join("base.ckpt")).unwrap();

    let o = ok(p.run(&[
        "--seed", "3", "edit", "--model", "base.ckpt", "--corpus", "c.jsonl", "--domain", "restaurant",
        "--layers", "mid", "--positions", "aspect",
    ]));
    assert!(stdout(&o).contains("suite.ckpt"));
    let metrics = p.json("edit-metrics.json");
    assert_eq!(metrics["seed"], 3);

    // eval of the saved suite reproduces the accuracy reported by edit
    let suite = p.out("suite.ckpt");
    ok(p.run(&[
        "eval", "--model", "base.ckpt", "--corpus", "c.jsonl", "--domain", "restaurant",
        "--suite", suite.to_str().unwrap(),
    ]));
    let eval = p.json("eval.json");
    assert_eq!(eval["test"]["accuracy"], metrics["accuracy"]);
    assert_eq!(eval["trainable"], metrics["trainable"]);

    // same seed, same suite
    let first = fs::read(&suite).unwrap();
    ok(p.run(&[
        "--seed", "3", "edit", "--model", "base.ckpt", "--corpus", "c.jsonl", "--domain", "restaurant",
        "--layers", "mid", "--positions", "aspect",
    ]));
    assert_eq!(first, fs::read(&suite).unwrap());

    let o = ok(p.run(&[
        "trace", "--model", "base.ckpt", "--corpus", "c.jsonl", "--samples", "12", "--noise-scale", "20",
        "--noise-scope", "all", "--resamples", "50", "--contrastive",
    ]));
    assert!(stdout(&o).contains("ATE"));
    let csv = fs::read_to_string(p.out("heatmap.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "bucket,1,2,3");
    let sidecar = p.json("heatmap.json");
    assert_eq!(sidecar["n_total"], 12);
    assert!(p.out("heatmap.positions.csv").exists());

    ok(p.run(&["in-domain", "--model", "base.ckpt", "--corpus", "c.jsonl", "--domains", "restaurant,laptop"]));
    ok(p.run(&[
        "ablate-positions", "--model", "base.ckpt", "--corpus", "c.jsonl", "--domain", "laptop",
    ]));
    ok(p.run(&[
        "ablate-layers", "--model", "base.ckpt", "--corpus", "c.jsonl", "--domain", "laptop", "--bands",
        "1;2,3",
    ]));
    ok(p.run(&[
        "ood", "--model", "base.ckpt", "--corpus", "c.jsonl", "--pairs", "device:restaurant",
    ]));
    let o = ok(p.run(&["report"]));
    let rows = p.json("report.json");
    let rows = rows.as_array().unwrap();
    // 2 baselines + 2 in-domain + 3 policies + 2 bands + 1 pair
    assert_eq!(rows.len(), 10, "{}", stdout(&o));
    assert!(rows.iter().any(|r| r["pair"] == "device->restaurant"));
    let csv = fs::read_to_string(p.out("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);

    let manifest = p.json("manifest.json");
    for cmd in [
        "gen-data", "train-base", "edit", "eval", "trace", "in-domain", "ablate-positions", "ablate-layers", "ood",
        "report",
    ] {
        assert!(manifest["commands"].get(cmd).is_some(), "manifest records {cmd}");
    }
    assert_eq!(manifest["commands"]["trace"]["resolved"]["noise"]["scale"], 20.0);

    assert_eq!(base_before, fs::read(p.dir.join("base.ckpt")).unwrap(), "base checkpoint untouched");

    // the same pair as source and target is an in-domain run
    let o = p.run(&["ood", "--model", "base.ckpt", "--corpus", "c.jsonl", "--pairs", "laptop:laptop"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    // overlapping custom bands
    let o = p.run(&[
        "ablate-layers", "--model", "base.ckpt", "--corpus", "c.jsonl", "--domain", "laptop", "--bands", "1,2;2,3",
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn report_without_rows_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tracedit(tmp.path(), &["--out-dir", "empty", "report"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}
