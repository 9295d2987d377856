use std::path::Path;
use std::process::{Command, Output};

fn dtigen(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtigen"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = dtigen(args, cwd);
    assert!(
        out.status.success(),
        "dtigen {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails(args: &[&str], cwd: &Path) -> String {
    let out = dtigen(args, cwd);
    assert!(!out.status.success(), "dtigen {args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

const TINY: &str = r#"{
  "model": {"layers": 1, "dim": 16, "heads": 2, "ffn_dim": 32, "max_source_len": 256, "max_target_len": 64},
  "optimizer": {"lr": 0.002, "warmup": 5},
  "train": {"max_steps": 6, "eval_every": 3, "patience": 2, "decode": {"max_len": 12}}
}"#;

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.json"), TINY).unwrap();

    ok(&["--seed", "4", "datagen", "--out", "gen", "--n-docs", "90", "--unlabeled-fraction", "0.4"], d);
    assert_eq!(lines(&d.join("gen/corpus.jsonl")), 54);
    assert_eq!(lines(&d.join("gen/unlabeled.jsonl")), 36);
    assert!(d.join("gen/manifest.json").exists());
    assert!(d.join("gen/lexicons/drug.json").exists());

    let stats = ok(&["stats", "--corpus", "gen/corpus.jsonl", "--lexicons", "gen/lexicons", "--out", "stats.json"], d);
    let v: serde_json::Value = serde_json::from_str(&stats).unwrap();
    assert_eq!(v["documents"], 54);

    ok(&["build-corpus", "--in", "gen/corpus.jsonl", "--lexicons", "gen/lexicons", "--split", "6,6,30", "--out", "c"], d);
    assert_eq!((lines(&d.join("c/test.jsonl")), lines(&d.join("c/train.jsonl"))), (6, 30));

    ok(&["train-bpe", "--corpus", "c", "--merges", "60", "--out", "bpe.json"], d);
    assert!(d.join("bpe.json.manifest.json").exists());
    ok(&["train", "--corpus", "c", "--bpe", "bpe.json", "--config", "tiny.json", "--out", "m.json"], d);
    assert!(d.join("m.train_report.json").exists());

    ok(&["generate", "--ckpt", "m.json", "--in", "c/test.jsonl", "--beam", "2", "--out", "pred.jsonl"], d);
    assert_eq!(lines(&d.join("pred.jsonl")), 6);
    ok(&["evaluate", "--gold", "c/test.jsonl", "--pred", "pred.jsonl", "--out", "eval.json"], d);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    let f1 = report["triplet"]["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));

    ok(&["semisup", "rule-filter", "--unlabeled", "gen/unlabeled.jsonl", "--lexicons", "gen/lexicons", "--min-occ", "2", "--out", "dsemi.jsonl"], d);
    assert!(lines(&d.join("dsemi.jsonl")) > 0);
    ok(&["semisup", "kd-label", "--ckpt", "m.json", "--in", "dsemi.jsonl", "--out", "kd.jsonl"], d);
    ok(&["semisup", "ds-label", "--labeled", "c/train.jsonl", "--unlabeled", "gen/unlabeled.jsonl", "--lexicons", "gen/lexicons", "--out", "ds.jsonl"], d);
    ok(&["semisup", "ds-label", "--labeled", "c/train.jsonl", "--unlabeled", "gen/unlabeled.jsonl", "--lexicons", "gen/lexicons", "--with-interaction", "--out", "dsi.jsonl"], d);
    assert!(lines(&d.join("dsi.jsonl")) <= lines(&d.join("ds.jsonl")));
    ok(&["semisup", "merge", "--labeled", "c/train.jsonl", "--pseudo", "ds.jsonl", "--upsample", "2", "--out", "merged.jsonl"], d);
    assert_eq!(lines(&d.join("merged.jsonl")), 60 + lines(&d.join("ds.jsonl")));

    ok(&["train", "--corpus", "c", "--init", "m.json", "--train-file", "merged.jsonl", "--max-steps", "2", "--out", "m2.json"], d);
    assert!(d.join("m2.json.manifest.json").exists());
}

#[test]
fn missing_lexicons_fail_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["datagen", "--out", "gen", "--n-docs", "20"], d);
    let err = fails(&["build-corpus", "--in", "gen/corpus.jsonl", "--lexicons", "nowhere", "--split", "2,2,10", "--out", "c"], d);
    assert!(err.contains("nowhere"), "{err}");
    let err = fails(&["semisup", "rule-filter", "--unlabeled", "gen/corpus.jsonl", "--lexicons", "nowhere", "--out", "x.jsonl"], d);
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir(d.join("gen")).unwrap();
    std::fs::write(d.join("gen/.dtigen.lock"), "").unwrap();
    let err = fails(&["datagen", "--out", "gen", "--n-docs", "10"], d);
    assert!(err.contains("lock"), "{err}");
    std::fs::remove_file(d.join("gen/.dtigen.lock")).unwrap();
    ok(&["datagen", "--out", "gen", "--n-docs", "10"], d);
    assert!(!d.join("gen/.dtigen.lock").exists());
}

#[test]
fn generate_rejects_a_different_order() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.json"), TINY).unwrap();
    ok(&["datagen", "--out", "gen", "--n-docs", "30"], d);
    ok(&["build-corpus", "--in", "gen/corpus.jsonl", "--lexicons", "gen/lexicons", "--split", "4,4,20", "--out", "c"], d);
    ok(&["train", "--corpus", "c", "--config", "tiny.json", "--max-steps", "1", "--order", "TID", "--out", "m.json"], d);
    let err = fails(&["generate", "--ckpt", "m.json", "--in", "c/test.jsonl", "--order", "DIT", "--out", "p.jsonl"], d);
    assert!(err.contains("order"), "{err}");
    ok(&["generate", "--ckpt", "m.json", "--in", "c/test.jsonl", "--order", "tid", "--out", "p.jsonl"], d);
}

#[test]
fn bad_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fails(&["build-corpus", "--in", "x", "--lexicons", "y", "--split", "1,2", "--out", "z"], d);
    fails(&["evaluate", "--gold", "missing.jsonl", "--pred", "missing.jsonl", "--out", "e.json"], d);
}

#[test]
fn pipeline_reruns_reproduce_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = r#"{
      "seed": 3,
      "source": {"kind": "synthetic", "seed": 3, "n_docs": 60},
      "corpus": {"split": [8, 8, 44]},
      "bpe_merges": 80,
      "model": {"layers": 1, "dim": 16, "heads": 2, "ffn_dim": 32, "max_source_len": 256, "max_target_len": 64},
      "train": {"max_steps": 4, "eval_every": 2, "decode": {"max_len": 12}}
    }"#;
    std::fs::write(d.join("p.json"), cfg).unwrap();
    ok(&["pipeline", "--config", "p.json", "--out", "a"], d);
    ok(&["pipeline", "--config", "p.json", "--out", "b"], d);
    for f in ["report.json", "predictions.jsonl", "corpus/train.jsonl", "bpe.json"] {
        assert_eq!(
            std::fs::read(d.join("a").join(f)).unwrap(),
            std::fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(d.join("a/manifest.json").exists());
}
