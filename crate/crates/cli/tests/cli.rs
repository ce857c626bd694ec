use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const ENTRIES: usize = 20;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_clarifyd"));
    c.env("RUST_LOG", "warn").env_remove("CLARIFYD_TOKEN");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed");
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn report(i: usize, id: &str) -> Value {
    json!({
        "id": id,
        "repo": "acme/widget",
        "title": format!("quux{i} crash when saving frob{i}"),
        "description": format!("Saving a frob{i} file with quux{i} enabled crashes the editor"),
        "question": format!("Which quux{i} version are you running?"),
        "ca1": format!("running quux{i} version {i}.0 with frob{i}"),
        "ca2": "thanks for the report",
        "ca3": "same problem here",
        "labels": ["bug"],
        "author": "reporter",
        "created_at": "2021-01-01T00:00:00Z",
        "closed_at": "2021-01-02T00:00:00Z",
        "lang": if i.is_multiple_of(2) { "Python" } else { "Java" },
    })
}

fn write_lines(path: &Path, items: &[Value]) {
    let body: String = items.iter().map(|v| format!("{v}\n")).collect();
    std::fs::write(path, body).unwrap();
}

/// Corpus of ENTRIES reports with distinct rare words, plus embeddings where
/// each `quuxN` is its own axis and a few filler words share one more axis.
fn fixture(dir: &Path, extra_config: &str) -> PathBuf {
    let corpus: Vec<Value> = (0..ENTRIES).map(|i| report(i, &format!("acme/widget#{i}"))).collect();
    write_lines(&dir.join("corpus.jsonl"), &corpus);
    let dim = ENTRIES + 1;
    let mut vecs = Vec::new();
    for i in 0..ENTRIES {
        let v: Vec<String> = (0..dim).map(|j| if j == i { "1" } else { "0" }.to_string()).collect();
        vecs.push(format!("quux{i} {}", v.join(" ")));
    }
    for w in ["thanks", "report", "same", "problem", "here"] {
        let v: Vec<String> = (0..dim).map(|j| if j == ENTRIES { "1" } else { "0" }.to_string()).collect();
        vecs.push(format!("{w} {}", v.join(" ")));
    }
    std::fs::write(dir.join("vectors.txt"), format!("{} {dim}\n{}\n", vecs.len(), vecs.join("\n"))).unwrap();
    let cfg = dir.join("clarifyd.toml");
    std::fs::write(
        &cfg,
        format!("data_dir = \".\"\ncorpus = \"corpus.jsonl\"\nembeddings = \"vectors.txt\"\n{extra_config}"),
    )
    .unwrap();
    cfg
}

#[test]
fn index_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), "");
    let a = ok_json(dir.path(), &["--config", "clarifyd.toml", "--json", "index"]);
    assert_eq!(a["entries"], ENTRIES);
    let first = std::fs::read(dir.path().join("index.json")).unwrap();
    run(dir.path(), &["--config", "clarifyd.toml", "index"]);
    assert_eq!(first, std::fs::read(dir.path().join("index.json")).unwrap());
    assert!(!dir.path().join(".clarifyd.lock").exists());
}

#[test]
fn index_on_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let v = ok_json(dir.path(), &["--corpus", "empty.jsonl", "--json", "index"]);
    assert_eq!(v["entries"], 0);
}

#[test]
fn missing_corpus_is_actionable() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--corpus", "nope.jsonl", "index"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("corpus not found") && err.contains("clarifyd mine"), "{err}");
}

#[test]
fn invalid_n_and_k_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), "");
    assert!(!run(dir.path(), &["--config", "clarifyd.toml", "--n", "15", "index"]).status.success());
    assert!(!run(dir.path(), &["--config", "clarifyd.toml", "--k", "11", "index"]).status.success());
    assert!(!run(dir.path(), &["--config", "clarifyd.toml", "--context-mode", "3", "index"]).status.success());
}

fn deficient(dir: &Path) {
    let mut r = report(3, "acme/other#99");
    r["ca1"] = Value::Null;
    r["ca2"] = Value::Null;
    r["ca3"] = Value::Null;
    std::fs::write(dir.join("deficient.json"), r.to_string()).unwrap();
}

#[test]
fn ask_returns_planted_answer() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), "");
    deficient(dir.path());
    run(dir.path(), &["--config", "clarifyd.toml", "index"]);
    let v = ok_json(dir.path(), &["--config", "clarifyd.toml", "--json", "ask", "deficient.json"]);
    let answers = v["answers"].as_array().unwrap();
    assert_eq!(answers.len(), 5);
    assert_eq!(answers[0]["generated"]["text"], "running quux3 version 3.0 with frob3");
    assert_eq!(answers[0]["source_id"], "acme/widget#3");
    for a in answers {
        assert_eq!(a["generated"]["text"], a["retrieved"]);
        assert!(a["embed_sim"].is_number() && a["doi"].is_number());
    }

    let v = ok_json(dir.path(), &["--config", "clarifyd.toml", "--json", "--k", "3", "--context-mode", "2", "ask", "deficient.json"]);
    let answers = v["answers"].as_array().unwrap();
    assert_eq!(answers.len(), 3);
    assert!(answers.iter().all(|a| a["includes_deficient"] == true && a["context_mode"] == 2));

    let out = run(dir.path(), &["--config", "clarifyd.toml", "ask", "deficient.json"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("#1 from acme/widget#3 ca1"), "{text}");
}

#[test]
fn ask_with_unreachable_service_falls_back_or_fails() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), "timeout_secs = 2\n");
    deficient(dir.path());
    let url = "http://127.0.0.1:9";
    let v = ok_json(
        dir.path(),
        &["--config", "clarifyd.toml", "--json", "--backend", "service", "--service-url", url, "--k", "1", "ask", "deficient.json"],
    );
    assert!(v["answers"][0]["generated"]["fallback_reason"].is_string());

    std::fs::write(dir.path().join("strict.toml"), "corpus = \"corpus.jsonl\"\nembeddings = \"vectors.txt\"\nfallback = false\ntimeout_secs = 2\n").unwrap();
    let out = run(dir.path(), &["--config", "strict.toml", "--backend", "service", "--service-url", url, "ask", "deficient.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("generation failed"));
}

#[test]
fn evaluate_identity_and_shape() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), "exclude_self = false\n");
    let heldout: Vec<Value> = (0..ENTRIES)
        .map(|i| {
            let mut r = report(i, &format!("acme/widget#{i}"));
            r["gold"] = r["ca1"].clone();
            r
        })
        .collect();
    write_lines(&dir.path().join("heldout.jsonl"), &heldout);
    let v = ok_json(dir.path(), &["--config", "clarifyd.toml", "--json", "evaluate", "heldout.jsonl", "--out-dir", "eval"]);
    assert_eq!(v["rows"].as_array().unwrap().len(), ENTRIES * 3);
    let all_k1 = v["aggregates"].as_array().unwrap().iter().find(|a| a["lang"] == "all" && a["k"] == 1).unwrap();
    assert!((all_k1["bleu"].as_f64().unwrap() - 100.0).abs() < 1e-9);
    assert_eq!(all_k1["wmd"].as_f64().unwrap(), 0.0);
    assert_eq!(v["generator"], "extractive-fallback");
    for f in ["metrics.csv", "metrics.json", "aggregates.csv"] {
        assert!(dir.path().join("eval").join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("eval/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "query_id,k,bleu,meteor,semsim,wmd");
    assert_eq!(csv.lines().count(), 1 + ENTRIES * 3);

    // deterministic under the fallback backend
    let again = ok_json(dir.path(), &["--config", "clarifyd.toml", "--json", "evaluate", "heldout.jsonl", "--out-dir", "eval2"]);
    assert_eq!(v, again);
}

#[test]
fn evaluate_empty_and_missing_gold() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), "");
    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let v = ok_json(dir.path(), &["--config", "clarifyd.toml", "--json", "evaluate", "empty.jsonl"]);
    assert!(v["rows"].as_array().unwrap().is_empty());

    write_lines(&dir.path().join("nogold.jsonl"), &[report(1, "x#1")]);
    let v = ok_json(dir.path(), &["--config", "clarifyd.toml", "--json", "evaluate", "nogold.jsonl"]);
    assert_eq!(v["skipped_without_gold"], 1);
}

fn issue(n: u64, author: &str, labels: &[&str]) -> Value {
    json!({
        "number": n,
        "title": format!("Editor crash {n}"),
        "body": "The editor crashes on save",
        "user": {"login": author},
        "labels": labels.iter().map(|l| json!({"name": l})).collect::<Vec<_>>(),
        "created_at": "2021-03-01T00:00:00Z",
        "closed_at": "2021-03-05T00:00:00Z",
    })
}

fn comment(id: u64, who: &str, day: u32, body: &str) -> Value {
    json!({"id": id, "user": {"login": who}, "body": body, "created_at": format!("2021-03-0{day}T00:00:00Z")})
}

fn put(root: &Path, rel: &str, v: &Value) {
    let p = root.join(rel);
    std::fs::create_dir_all(p.parent().unwrap()).unwrap();
    std::fs::write(p, v.to_string()).unwrap();
}

#[test]
fn ingest_mine_chain_from_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    put(&fx, "repos/acme/widget/issues.json", &json!([issue(1, "rep1", &["bug"]), issue(2, "rep2", &["crash"]), issue(3, "rep3", &["feature"])]));
    put(
        &fx,
        "repos/acme/widget/issues/1/comments.json",
        &json!([
            comment(13, "other", 4, "Same crash on version 2.3 here"),
            comment(10, "dev", 1, "Thanks for reporting"),
            comment(12, "rep1", 3, "I am running version 2.3"),
            comment(11, "dev", 2, "Which version are you running?"),
        ]),
    );
    put(&fx, "repos/acme/widget/issues/2/comments.json", &json!([comment(20, "dev", 1, "Fixed in main.")]));
    std::fs::write(
        dir.path().join("clarifyd.toml"),
        "data_dir = \".\"\nfixtures = \"fx\"\napi_base = \"http://fixture\"\nrepos = [{ name = \"acme/widget\", language = \"Python\" }]\n",
    )
    .unwrap();
    let v = ok_json(dir.path(), &["--config", "clarifyd.toml", "--json", "ingest"]);
    assert_eq!(v["threads"], 2);

    std::fs::write(dir.path().join("votes.csv"), "issue_id,annotator,choice\nacme/widget#1,a,ca1\nacme/widget#1,b,ca3\nacme/widget#1,c,ca1\n").unwrap();
    let v = ok_json(dir.path(), &["--config", "clarifyd.toml", "--json", "mine", "--votes", "votes.csv"]);
    assert_eq!((v["mined"].as_u64(), v["no_question"].as_u64(), v["heldout"].as_u64()), (Some(1), Some(1), Some(1)));

    let line = std::fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap();
    let e: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(e["id"], "acme/widget#1");
    assert_eq!(e["question"], "Which version are you running?");
    assert_eq!(e["ca1"], "I am running version 2.3");
    assert_eq!(e["ca2"], "I am running version 2.3");
    assert_eq!(e["ca3"], "I am running version 2.3");
    assert_eq!(e["lang"], "Python");
    let h: Value = serde_json::from_str(std::fs::read_to_string(dir.path().join("heldout.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(h["gold"], "I am running version 2.3");

    // mining is idempotent
    let before = std::fs::read(dir.path().join("corpus.jsonl")).unwrap();
    run(dir.path(), &["--config", "clarifyd.toml", "mine"]);
    assert_eq!(before, std::fs::read(dir.path().join("corpus.jsonl")).unwrap());
}

#[test]
fn held_lock_blocks_writers() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), "");
    std::fs::write(dir.path().join(".clarifyd.lock"), "1").unwrap();
    let out = run(dir.path(), &["--config", "clarifyd.toml", "index"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}
