//! End-to-end runs of the installed binary: the subcommand chain on a
//! synthetic pool, exit codes, config precedence, and replay.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lorapool(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lorapool"))
        .args(args)
        .current_dir(dir)
        .env_remove("LORAPOOL_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lorapool(dir, args);
    assert!(
        out.status.success(),
        "{:?} failed:\n{}{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    lorapool(dir, args).status.code().expect("exit code")
}

fn json_file(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn subcommand_chain_on_a_synthetic_pool() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    ok(dir, &["toygen", "--toy", "seed=3,adapters=4,tasks=1", "--out", "pool"]);
    assert!(dir.join("pool/manifest.json").exists());
    assert!(dir.join("pool/run_manifest.json").exists());
    let task = "pool/tasks/task00.json";

    ok(dir, &[
        "retrieve", "--manifest", "pool/manifest.json", "--task", task,
        "--out", "retrieval.json",
    ]);
    let retrieval = json_file(&dir.join("retrieval.json"));
    assert_eq!(retrieval["task_id"], "task00");
    let views = retrieval["views"].as_object().unwrap();
    assert_eq!(views.len(), 2);
    for (_, candidates) in views {
        assert!(!candidates.as_array().unwrap().is_empty());
    }

    let stdout = ok(dir, &[
        "search-weights", "--manifest", "pool/manifest.json", "--task", task,
        "--seed", "5", "--out", "weights.json",
    ]);
    assert!(stdout.contains("loss"), "progress line missing: {stdout}");
    let weights: BTreeMap<String, f32> =
        serde_json::from_str(&fs::read_to_string(dir.join("weights.json")).unwrap()).unwrap();
    assert_eq!(weights.len(), 4);
    assert!(weights.values().all(|w| (-1.5..=1.5).contains(w)));

    ok(dir, &[
        "sdp", "--manifest", "pool/manifest.json", "--p", "0.5", "--seed", "9",
        "--out", "sparse",
    ]);
    assert!(dir.join("sparse/a00--seed9.bin").exists());
    assert!(dir.join("sparse/a00--seed9.masks.json").exists());

    ok(dir, &[
        "merge", "--manifest", "pool/manifest.json", "--weights", "weights.json",
        "--method", "lasrc", "--diagnostics", "diag.jsonl", "--out", "composed.bin",
    ]);
    assert!(dir.join("composed.bin").exists());
    let diag = fs::read_to_string(dir.join("diag.jsonl")).unwrap();
    assert_eq!(diag.lines().count(), 2, "one record per block");
    for line in diag.lines() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(row["block_id"].is_string());
        assert!(row["gamma"].is_number());
    }

    // Aggregate hand-written per-view rows where the reliable view is right.
    let rows = r#"{"task_id":"t0","view_id":"v1","query_id":"q1","raw_prediction":"Paris.","support_loss":0.2,"reference":"paris"}
{"task_id":"t0","view_id":"v2","query_id":"q1","raw_prediction":"Rome","support_loss":1.4,"reference":"paris"}
{"task_id":"t0","view_id":"v1","query_id":"q2","raw_prediction":"blue","support_loss":0.2,"reference":"blue"}
{"task_id":"t0","view_id":"v2","query_id":"q2","raw_prediction":"blue","support_loss":1.4,"reference":"blue"}
"#;
    fs::write(dir.join("views.jsonl"), rows).unwrap();
    ok(dir, &[
        "aggregate", "--predictions", "views.jsonl", "--mode", "support",
        "--out", "agg",
    ]);
    for name in ["decisions.jsonl", "answers.jsonl", "predictions.jsonl", "summary.json"] {
        assert!(dir.join("agg").join(name).exists(), "missing {name}");
    }
    let summary = json_file(&dir.join("agg/summary.json"));
    assert_eq!(summary["mode"], "support");
    assert_eq!(summary["diagnostic"], false);
    assert_eq!(summary["macro_em"], 100.0);

    let stdout = ok(dir, &["eval", "--predictions", "agg/predictions.jsonl"]);
    let eval: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(eval["macro_em"], 100.0);
    assert_eq!(eval["diagnostic"], false);
    ok(dir, &["eval", "--predictions", "agg/predictions.jsonl", "--out", "eval.json"]);
    assert!(dir.join("eval.json.run.json").exists(), "eval run manifest");

    let stdout = ok(dir, &[
        "audit", "--predictions", "agg/predictions.jsonl",
        "--baseline", "agg/predictions.jsonl",
        "--permutations", "200", "--bootstrap", "200", "--out", "audit.json",
    ]);
    assert!(stdout.contains("p"), "audit table missing: {stdout}");
    let audit = json_file(&dir.join("audit.json"));
    assert_eq!(audit["p_value"], 1.0, "identical files are never significant");
    assert_eq!(audit["n_plus"], 0);
    assert_eq!(audit["n_minus"], 0);
}

#[test]
fn oracle_mode_marks_every_downstream_row() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let rows = r#"{"task_id":"t0","view_id":"v1","query_id":"q1","raw_prediction":"a","support_loss":0.1,"reference":"b"}
{"task_id":"t0","view_id":"v2","query_id":"q1","raw_prediction":"b","support_loss":0.9,"reference":"b"}
"#;
    fs::write(dir.join("views.jsonl"), rows).unwrap();
    ok(dir, &[
        "aggregate", "--predictions", "views.jsonl", "--mode", "oracle",
        "--out", "agg",
    ]);
    let summary = json_file(&dir.join("agg/summary.json"));
    assert_eq!(summary["diagnostic"], true);
    // The low-loss view answers wrong; only label access picks the right one.
    assert_eq!(summary["macro_em"], 100.0);
    for name in ["answers.jsonl", "predictions.jsonl"] {
        let text = fs::read_to_string(dir.join("agg").join(name)).unwrap();
        for line in text.lines() {
            let row: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(row["diagnostic"], true, "{name} row not marked: {line}");
        }
    }
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(dir, &["--help"]), 0);
    assert_eq!(code(dir, &["no-such-command"]), 1);
    assert_eq!(code(dir, &["merge", "--bogus-flag"]), 1);
    // Unreadable input.
    assert_eq!(
        code(dir, &[
            "retrieve", "--manifest", "missing.json", "--task", "missing.json",
            "--out", "r.json",
        ]),
        2
    );
    // Violated invariant: a weight for an adapter the pool does not have.
    ok(dir, &["toygen", "--toy", "seed=1,tasks=1", "--out", "pool"]);
    fs::write(dir.join("ghost.json"), r#"{"ghost": 0.5}"#).unwrap();
    assert_eq!(
        code(dir, &[
            "merge", "--manifest", "pool/manifest.json", "--weights", "ghost.json",
            "--out", "c.bin",
        ]),
        3
    );
    // Out-of-range drop rate.
    assert_eq!(
        code(dir, &[
            "sdp", "--manifest", "pool/manifest.json", "--p", "1.5", "--out", "s",
        ]),
        3
    );
    // Asking a plain sum for composer diagnostics is a usage error.
    fs::write(dir.join("w.json"), r#"{"a00": 1.0}"#).unwrap();
    assert_eq!(
        code(dir, &[
            "merge", "--manifest", "pool/manifest.json", "--weights", "w.json",
            "--method", "linear", "--diagnostics", "d.jsonl", "--out", "c.bin",
        ]),
        1
    );
}

#[test]
fn config_file_fills_defaults_and_flags_override_it() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("cfg.toml"),
        "method = \"ties\"\nmode = \"uniform\"\n",
    )
    .unwrap();

    let run = |extra: &[&str], out: &str| {
        let mut args = vec!["pipeline", "--toy", "seed=4,tasks=1", "--out", out];
        args.extend_from_slice(extra);
        let output = Command::new(env!("CARGO_BIN_EXE_lorapool"))
            .args(&args)
            .current_dir(dir)
            .env("LORAPOOL_CONFIG", dir.join("cfg.toml"))
            .output()
            .expect("binary runs");
        assert!(
            output.status.success(),
            "{}",
            String::from_utf8_lossy(&output.stderr)
        );
    };

    run(&[], "from_file");
    let summary = json_file(&dir.join("from_file/summary.json"));
    assert_eq!(summary["method"], "ties");
    assert_eq!(summary["mode"], "uniform");

    run(&["--method", "linear"], "flag_wins");
    let summary = json_file(&dir.join("flag_wins/summary.json"));
    assert_eq!(summary["method"], "linear");
    assert_eq!(summary["mode"], "uniform", "file still fills what flags omit");
}

#[test]
fn pipeline_replay_verifies_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["pipeline", "--toy", "seed=5,tasks=1", "--out", "run"]);
    let stdout = ok(dir, &["pipeline", "--replay", "run/run_manifest.json"]);
    assert!(
        stdout.contains("byte-identical"),
        "replay confirmation missing: {stdout}"
    );

    // Manifests from any subcommand replay, not just pipeline runs.
    fs::write(dir.join("w.json"), r#"{"a00": 0.5, "a01": 0.25}"#).unwrap();
    ok(dir, &[
        "merge", "--manifest", "run/pool/manifest.json", "--weights", "w.json",
        "--method", "ties", "--out", "c.bin",
    ]);
    let stdout = ok(dir, &["pipeline", "--replay", "c.bin.run.json"]);
    assert!(stdout.contains("replayed merge"), "wrong replay: {stdout}");
}
