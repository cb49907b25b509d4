use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ged(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ged"))
        .args(args)
        .current_dir(dir)
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ged(dir, args);
    assert!(out.status.success(), "ged {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn unknown_command_and_flag_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["score", "--bogus"], &["train"], &[]] {
        let out = ged(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
}

#[test]
fn score_reproduces_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    // tp 3, fp 1, fn 2, tn 4
    let gold = "a\t1\nb\t1\nc\t1\nd\t1\ne\t1\nf\t0\ng\t0\nh\t0\ni\t0\nj\t0\n";
    let pred = "j\t1\ni\t0\nh\t0\ng\t0\nf\t0\ne\t0\nd\t0\nc\t1\nb\t1\na\t1\n";
    fs::write(dir.path().join("gold.tsv"), gold).unwrap();
    fs::write(dir.path().join("pred.tsv"), pred).unwrap();
    let report = ok(dir.path(), &["score", "--pred", "pred.tsv", "--gold", "gold.tsv", "--out", "s"]);
    assert_eq!(report, "tp 3\nfp 1\nfn 2\ntn 4\nprecision 0.7500\nrecall 0.6000\nf1 0.6667\n");
    assert_eq!(fs::read_to_string(dir.path().join("s.txt")).unwrap(), report);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("s.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "score");
    assert_eq!(manifest["summary"]["tp"], 3);

    fs::write(dir.path().join("short.tsv"), "a\t1\n").unwrap();
    assert!(!ged(dir.path(), &["score", "--pred", "short.tsv", "--gold", "gold.tsv"]).status.success());
    assert!(!ged(dir.path(), &["score", "--pred", "missing.tsv", "--gold", "gold.tsv"]).status.success());
}

#[test]
fn synth_then_prepare_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--train", "60", "--dev", "20", "--test", "10", "--seed", "3", "--out", "syn"]);
    for f in ["train.txt", "dev.txt", "test.txt", "synth.manifest.json"] {
        assert!(d.join("syn").join(f).exists(), "{f}");
    }
    let prep = ["prepare", "--train", "syn/train.txt", "--dev", "syn/dev.txt", "--test", "syn/test.txt", "--out", "data"];
    ok(d, &prep);
    let first = fs::read(d.join("data/prepare.manifest.json")).unwrap();
    let vocab = fs::read(d.join("data/vocab.txt")).unwrap();
    ok(d, &prep);
    assert_eq!(fs::read(d.join("data/prepare.manifest.json")).unwrap(), first);
    assert_eq!(fs::read(d.join("data/vocab.txt")).unwrap(), vocab);
    let gold = fs::read_to_string(d.join("data/dev.gold.tsv")).unwrap();
    assert_eq!(gold.lines().filter(|l| !l.starts_with('#')).count(), 20);

    // malformed lines are logged and skipped, or fatal under --strict
    fs::write(d.join("bad.txt"), "fine line .\nbroken <ins> line .\n").unwrap();
    ok(d, &["prepare", "--train", "bad.txt", "--dev", "syn/dev.txt", "--out", "lenient"]);
    let log = fs::read_to_string(d.join("lenient/rejected.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!((rec["split"].as_str(), rec["line"].as_u64()), (Some("train"), Some(2)));
    assert_eq!(fs::read_to_string(d.join("lenient/train.gold.tsv")).unwrap().lines().count(), 1);
    let out = ged(d, &["prepare", "--strict", "--train", "bad.txt", "--dev", "syn/dev.txt", "--out", "strict"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn bad_config_override_fails() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--train", "20", "--dev", "5", "--out", "syn"]);
    let out = ged(d, &["prepare", "--train", "syn/train.txt", "--dev", "syn/dev.txt", "--set", "no_such_key=1", "--out", "data"]);
    assert!(!out.status.success());
    let out = ged(d, &["prepare", "--train", "syn/train.txt", "--dev", "syn/dev.txt", "--set", "noequals", "--out", "data"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ensemble_votes_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("a.tsv"), "x\t1\ny\t0\nz\t1\n").unwrap();
    fs::write(d.join("b.tsv"), "x\t1\ny\t1\nz\t0\n").unwrap();
    fs::write(d.join("c.tsv"), "x\t0\ny\t0\nz\t1\n").unwrap();
    ok(d, &["ensemble", "--pred", "a.tsv", "--pred", "b.tsv", "--pred", "c.tsv", "--out", "vote"]);
    let vote = fs::read_to_string(d.join("vote.tsv")).unwrap();
    let body: Vec<&str> = vote.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body, ["x\t1", "y\t0", "z\t1"]);
    assert!(d.join("vote.manifest.json").exists());
}

#[test]
fn grad_check_passes_and_fails_under_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(d, &["grad-check", "--target", "ops", "--out", "good"]);
    assert!(out.contains("tanh") && !out.contains("FAIL"));
    let bad = ged(d, &["grad-check", "--target", "ops", "--corrupt-tanh", "--out", "bad"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("bad.manifest.json")).unwrap()).unwrap();
    assert!(manifest["summary"]["failed"].as_u64().unwrap() > 0);
    // the corruption flag stays out of the help text
    let help = ok(d, &["grad-check", "--help"]);
    assert!(!help.contains("corrupt"));
}

#[test]
fn train_decode_tune_on_a_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--train", "40", "--dev", "12", "--seed", "5", "--out", "syn"]);
    ok(d, &["prepare", "--train", "syn/train.txt", "--dev", "syn/dev.txt", "--out", "data"]);
    let tiny = ["--set", "epochs=2", "--set", "hidden=8", "--set", "layers=1", "--set", "word_dim=8", "--set", "beam=2"];
    let mut train = vec!["train", "--data", "data", "--model", "word", "--preset", "desk", "--quiet", "--out", "run"];
    train.extend(tiny);
    ok(d, &train);
    for f in ["config.txt", "manifest.jsonl", "best.ckpt", "epoch002.ckpt", "train.manifest.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    ok(d, &["tune", "--run", "run", "--data", "data", "--grid=-1:1:1", "--refine", "", "--out", "t"]);
    let tuned: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("t.json")).unwrap()).unwrap();
    assert_eq!(tuned["sweep"].as_array().unwrap().len(), 3);
    ok(d, &["decode", "--run", "run", "--data", "data", "--split", "dev", "--bias-from", "t.json", "--out", "p"]);
    assert_eq!(fs::read_to_string(d.join("p.jsonl")).unwrap().lines().count(), 12);
    ok(d, &["score", "--pred", "p.tsv", "--gold", "data/dev.gold.tsv"]);
    ok(d, &["sweep-plot-data", "--from", "t.json", "--out", "plot.tsv"]);
    assert_eq!(fs::read_to_string(d.join("plot.tsv")).unwrap().lines().count(), 4);

    // resuming a finished run trains nothing new and still succeeds
    let mut resume = train.clone();
    resume.push("--resume");
    ok(d, &resume);

    let out = ged(d, &["decode", "--run", "run", "--data", "data", "--split", "nope", "--out", "q"]);
    assert!(!out.status.success());
    let out = ged(d, &["decode", "--run", "missing", "--data", "data", "--split", "dev", "--out", "q"]);
    assert!(!out.status.success());
}
