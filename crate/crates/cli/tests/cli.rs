use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patent-kg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn one_patent_fixture(dir: &Path) {
    fs::write(
        dir.join("d.jsonl"),
        r#"{"id":"US1","year":2010,"title":"Router","abstract":"A router with packet switching and a firewall."}"#,
    )
    .unwrap();
    fs::write(dir.join("l.txt"), "router\npacket switching\nfirewall\n").unwrap();
}

#[test]
fn build_kg_one_patent() {
    let dir = tempfile::tempdir().unwrap();
    one_patent_fixture(dir.path());
    ok(dir.path(), &["build-kg", "--docs", "d.jsonl", "--lexicon", "l.txt", "--cutoff", "2010", "--out", "g.json"]);
    let g: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(g["edges"].as_array().unwrap().len(), 3);
    assert!(dir.path().join("g.json.config.json").exists());
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["build-kg", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = run(dir.path(), &["build-kg", "--docs", "d.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["build-kg", "--docs", "missing.jsonl", "--lexicon", "l.txt", "--cutoff", "2010", "--out", "g.json"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));

    fs::write(dir.path().join("bad.json"), r#"{"cutoff": 2010, "colour": "red"}"#).unwrap();
    let out = run(dir.path(), &["build-kg", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    one_patent_fixture(dir.path());
    ok(dir.path(), &["build-kg", "--docs", "d.jsonl", "--lexicon", "l.txt", "--cutoff", "2010", "--out", "g.json"]);
    let out = run(
        dir.path(),
        &["train", "--graph", "g.json", "--method", "transe", "--learning-rate", "1e308", "--epochs", "5", "--out", "m.json"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn version_lists_formats() {
    let out = run(Path::new("."), &["--version"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("graph format 1"));
}

const SMALL: [&str; 6] = ["--docs-per-year", "15", "--years", "4", "--entities-per-community", "8"];

#[test]
fn evaluate_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["evaluate", "--synth-seed", "42", "--epochs", "2", "--dim", "8", "--out", "a.csv"];
    args.extend(SMALL);
    ok(dir.path(), &args);
    let at = args.iter().position(|a| *a == "a.csv").unwrap();
    args[at] = "b.csv";
    ok(dir.path(), &args);
    let a = fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1 + 3 * 3);
}

#[test]
fn sidecars_reproduce_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut synth = vec!["synth", "--out", "d.jsonl", "--lexicon-out", "l.txt"];
    synth.extend(SMALL);
    ok(d, &synth);
    ok(d, &["build-kg", "--docs", "d.jsonl", "--lexicon", "l.txt", "--cutoff", "2011", "--out", "g.json"]);
    ok(d, &["build-kg", "--docs", "d.jsonl", "--lexicon", "l.txt", "--cutoff", "2013", "--out", "f.json"]);
    ok(d, &["train", "--graph", "g.json", "--method", "cgat", "--docs", "d.jsonl", "--lexicon", "l.txt", "--epochs", "3", "--dim", "8", "--out", "m.json"]);
    ok(d, &["predict-links", "--graph", "g.json", "--model", "m.json", "--out", "links.json"]);
    ok(d, &["predict-patents", "--graph", "g.json", "--links", "links.json", "--future", "f.json", "--out", "c.json"]);
    for out in ["d.jsonl", "g.json", "m.json", "links.json", "c.json"] {
        let before = fs::read(d.join(out)).unwrap();
        fs::remove_file(d.join(out)).unwrap();
        let cmd = match out {
            "d.jsonl" => "synth",
            "g.json" => "build-kg",
            "m.json" => "train",
            "links.json" => "predict-links",
            _ => "predict-patents",
        };
        ok(d, &[cmd, "--config", &format!("{out}.config.json")]);
        assert_eq!(fs::read(d.join(out)).unwrap(), before, "{out}");
    }
}

#[test]
fn cnm_needs_no_model_and_rejects_one() {
    let dir = tempfile::tempdir().unwrap();
    one_patent_fixture(dir.path());
    ok(dir.path(), &["build-kg", "--docs", "d.jsonl", "--lexicon", "l.txt", "--cutoff", "2010", "--out", "g.json"]);
    ok(dir.path(), &["predict-links", "--graph", "g.json", "--method", "cnm", "--out", "l.json"]);
    let out = run(dir.path(), &["predict-links", "--graph", "g.json", "--method", "gat", "--out", "l.json"]);
    assert_eq!(out.status.code(), Some(1));
}
