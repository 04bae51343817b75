use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_veracity"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn workflow_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d.jsonl");
    let model = tmp.path().join("m.json");
    let results = tmp.path().join("r.jsonl");
    let report = tmp.path().join("report.json");
    assert!(run(&["synth", "--n-per-class", "12", "--seed", "5", "--out", s(&data)]).status.success());

    let out = run(&["train", "--data", s(&data), "--model", s(&model), "--set", "epochs=1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run(&["verify", "--model", s(&model), "--data", s(&data), "--out", s(&results)]).status.success());
    assert_eq!(std::fs::read_to_string(&results).unwrap().lines().count(), 36);
    assert!(run(&["eval", "--results", s(&results), "--data", s(&data), "--out", s(&report)]).status.success());
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["la", "fev", "la_z_hard", "la_z_soft", "agree_hard", "agree_soft", "culpa"] {
        assert!(value.get(key).is_some(), "{key} missing from {value}");
    }

    let out = run(&["train", "--data", s(&data), "--model", s(&model), "--set", "lambda=1.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));
    let out = run(&["eval", "--results", s(&tmp.path().join("missing")), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));

    // A prior file whose triples do not sum to one is rejected at its line.
    let prior = tmp.path().join("prior.jsonl");
    let first = std::fs::read_to_string(&data).unwrap();
    let id: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    std::fs::write(
        &prior,
        format!("{{\"record_id\": {}, \"phrase_index\": 0, \"p_ref\": 0.2, \"p_nei\": 0.2, \"p_sup\": 0.2}}\n", id["id"]),
    )
    .unwrap();
    let out = run(&[
        "train",
        "--data",
        s(&data),
        "--model",
        s(&model),
        "--set",
        &format!("prior_source=\"{}\"", s(&prior)),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prior.jsonl:1"));
}

#[test]
fn external_answers_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d.jsonl");
    let requests = tmp.path().join("q.jsonl");
    let answers = tmp.path().join("a.jsonl");
    let premises = tmp.path().join("p.jsonl");
    assert!(run(&["synth", "--n-per-class", "2", "--seed", "1", "--out", s(&data)]).status.success());
    assert!(run(&["premises", "--data", s(&data), "--requests-out", s(&requests)]).status.success());
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&requests)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!lines.is_empty());
    let replies: String = lines
        .iter()
        .map(|q| format!("{{\"qid\": {}, \"answers\": [\"something\"]}}\n", q["qid"]))
        .collect();
    std::fs::write(&answers, replies).unwrap();
    let out = run(&[
        "premises",
        "--data",
        s(&data),
        "--out",
        s(&premises),
        "--answers-file",
        s(&answers),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = std::fs::read_to_string(&premises).unwrap();
    assert_eq!(rows.lines().count(), lines.len());
    assert!(rows.lines().all(|l| l.contains("\"answers\":[\"something\"]")));
}

#[test]
fn ablation_prints_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d.jsonl");
    let rows = tmp.path().join("rows.jsonl");
    assert!(run(&["synth", "--n-per-class", "8", "--seed", "2", "--out", s(&data)]).status.success());
    let out = run(&[
        "ablate", "--kind", "lambda", "--train", s(&data), "--eval", s(&data), "--grid", "0,0.5", "--out", s(&rows),
        "--set", "epochs=1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.contains("lambda=")).count(), 2, "{stdout}");
    assert_eq!(std::fs::read_to_string(&rows).unwrap().lines().count(), 2);
    assert_eq!(run(&["ablate", "--kind", "depth", "--train", s(&data), "--eval", s(&data)]).status.code(), Some(1));
}
