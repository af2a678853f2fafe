// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::*;

fn s(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn evaluate_fixture_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "evaluate",
            "--generations",
            s(&metrics_fixture("captions.jsonl")),
            "--annotations",
            s(&metrics_fixture("annotations.json")),
            "--synonyms",
            s(&metrics_fixture("synonyms.json")),
            "--judgments",
            s(&metrics_fixture("judgments.jsonl")),
            "--open-chair",
            "--out",
            "report.json",
            "--csv",
            "report.csv",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_json(&dir.path().join("report.json"));
    assert_eq!(r["C_S"], 0.4);
    assert_eq!(r["C_I"], 0.25);
    assert_eq!(r["C_O"], 0.25);
    assert_eq!(r["precision"], 0.75);
    assert_eq!(r["recall"], 0.5);
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), csv);
}

#[test]
fn open_chair_without_judgments_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "evaluate",
            "--generations",
            s(&metrics_fixture("captions.jsonl")),
            "--world",
            s(&world_fixture()),
            "--open-chair",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
}

#[test]
fn empty_generations_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let out = run_in(dir.path(), &["evaluate", "--generations", "empty.jsonl", "--world", s(&world_fixture())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "empty_corpus");
}

#[test]
fn missing_input_exits_1_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["profile", "--records", "no_such_records.jsonl", "--out", "p.json"]);
    assert_eq!(out.status.code(), Some(1));
    let e = stderr_json(&out);
    assert_eq!(e["error"], "io");
    assert!(e["message"].as_str().unwrap().contains("no_such_records.jsonl"));
}

#[test]
fn missing_config_path_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), r#"{"weights": "gone.bin"}"#).unwrap();
    let out = run_in(dir.path(), &["--config", "run.json", "export-heatmap", "--profile", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("gone.bin"));
}

#[test]
fn bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["generate", "--mode", "loud"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
    let out = run_in(dir.path(), &["sweep", "--world", s(&world_fixture()), "--mode", "iat", "--alphas", "0", "--layers", "3-1", "--out", "s.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "invalid_config");
}

#[test]
fn adaiat_without_profile_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["generate", "--world", s(&world_fixture()), "--mode", "adaiat", "--out", "g.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let e = stderr_json(&out);
    assert_eq!(e["error"], "profile_required");
    assert_eq!(e["message"], "profile required");
}

#[test]
fn zero_alpha_generation_matches_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let w = world_fixture();
    let base = ["generate", "--world", s(&w), "--max-tokens", "5"];
    let run = |extra: &[&str], out: &str| {
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", out]);
        let o = run_in(dir.path(), &args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        read_jsonl(&dir.path().join(out))
    };
    let none = run(&["--mode", "none"], "none.jsonl");
    let iat = run(&["--mode", "iat", "--alpha", "0"], "iat.jsonl");
    assert_eq!(none.len(), 60);
    for (a, b) in none.iter().zip(&iat) {
        assert_eq!(a["tokens"], b["tokens"]);
        assert!(a["tokens"].as_array().unwrap().len() <= 5);
        assert!(a.get("maps").is_none());
    }
}

#[test]
fn synthesized_files_drive_generate_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let w = world_fixture();
    assert!(run_in(dir.path(), &["synth-world", "--world", s(&w), "--out", "world"]).status.success());
    let o = run_in(
        dir.path(),
        &[
            "generate", "--weights", "world/weights.bin", "--vocab", "world/vocab.json", "--prompts",
            "world/prompts.jsonl", "--stop-token", "<eos>", "--max-tokens", "12", "--capture", "--out", "files.jsonl",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run_in(dir.path(), &["generate", "--world", s(&w), "--out", "direct.jsonl"]).status.success());
    let files = read_jsonl(&dir.path().join("files.jsonl"));
    let direct = read_jsonl(&dir.path().join("direct.jsonl"));
    for (a, b) in files.iter().zip(&direct) {
        assert_eq!(a["tokens"], b["tokens"]);
        assert_eq!(a["image_id"], b["image_id"]);
        assert_eq!(a["maps"].as_array().unwrap().len(), a["tokens"].as_array().unwrap().len());
    }
    let by_files = run_in(
        dir.path(),
        &["evaluate", "--generations", "files.jsonl", "--annotations", "world/annotations.json", "--synonyms", "world/synonyms.json"],
    );
    let by_world = run_in(dir.path(), &["evaluate", "--generations", "direct.jsonl", "--world", s(&w)]);
    assert!(by_files.status.success());
    assert_eq!(by_files.stdout, by_world.stdout);
}

#[test]
fn profile_reports_and_config_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({ "world": world_fixture(), "threshold": { "beta": 0.0 }, "out": "from_config.json" });
    std::fs::write(dir.path().join("run.json"), cfg.to_string()).unwrap();
    let o = run_in(dir.path(), &["--config", "run.json", "profile"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    for key in ["n_r ", "n_h ", "m_min ", "m_max ", "t ["] {
        assert!(stdout.contains(key), "{stdout}");
    }
    let p = read_json(&dir.path().join("from_config.json"));
    assert_eq!(p["beta"], 0.0);
    assert_eq!(p["t"], p["layer_sums_h"]);
    assert!(p["n_r"].as_u64().unwrap() > 0 && p["n_h"].as_u64().unwrap() > 0);

    let o = run_in(dir.path(), &["--config", "run.json", "profile", "--beta", "1", "--out", "flag.json"]);
    assert!(o.status.success());
    let p = read_json(&dir.path().join("flag.json"));
    assert_eq!(p["beta"], 1.0);
    assert_eq!(p["t"], p["layer_sums_r"]);
}

#[test]
fn profile_without_hallucinations_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("w.json"), r#"{"prior_strength": 0.0, "n_images": 2, "n_profile_images": 8}"#).unwrap();
    let o = run_in(dir.path(), &["profile", "--world", "w.json", "--out", "p.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "insufficient_labeled_data");
}

#[test]
fn sweep_grid_and_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let w = world_fixture();
    let o = run_in(
        dir.path(),
        &["sweep", "--world", s(&w), "--mode", "iat", "--alphas", "0,0.5,1", "--betas", "0.5", "--layers", "0-1,2-3", "--out", "s.csv"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "mode,alpha,beta,layers,C_S,C_I,F1,D_1");
    assert_eq!(lines.len(), 7);
    let metrics = |l: &str| l.splitn(5, ',').nth(4).unwrap().to_string();
    assert_eq!(metrics(lines[1]), metrics(lines[2]));

    assert!(run_in(dir.path(), &["profile", "--world", s(&w), "--out", "p.json"]).status.success());
    for m in ["a_r_tp", "a_h_tp", "m"] {
        let o = run_in(dir.path(), &["export-heatmap", "--profile", "p.json", "--matrix", m, "--out", "h.csv"]);
        assert!(o.status.success());
        assert_eq!(std::fs::read_to_string(dir.path().join("h.csv")).unwrap().lines().count(), 1 + 16);
    }
    let o = run_in(dir.path(), &["export-heatmap", "--profile", "p.json", "--matrix", "q", "--out", "h.csv"]);
    assert_eq!(o.status.code(), Some(2));

    let mut p = read_json(&dir.path().join("p.json"));
    p["a_h_tp"] = p["a_r_tp"].clone();
    p["m"] = serde_json::json!(vec![1.0; 16]);
    std::fs::write(dir.path().join("same.json"), p.to_string()).unwrap();
    assert!(run_in(dir.path(), &["export-heatmap", "--profile", "same.json", "--out", "ones.csv"]).status.success());
    let ones = std::fs::read_to_string(dir.path().join("ones.csv")).unwrap();
    for line in ones.lines().skip(1) {
        assert_eq!(line.rsplit(',').next().unwrap().parse::<f64>().unwrap(), 1.0);
    }
}

#[test]
fn compare_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(
        dir.path(),
        &["compare", "--world", s(&world_fixture()), "--methods", s(&repo("fixtures/methods_calibrated.json")), "--out", "cmp"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&dir.path().join("cmp/comparison.json"));
    let names: Vec<&str> = r["rows"].as_array().unwrap().iter().map(|x| x["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["none", "pai", "adaiat"]);
    let csv = std::fs::read_to_string(dir.path().join("cmp/comparison.csv")).unwrap();
    assert!(csv.starts_with("method,C_S,C_I,F1,D_1,mean_tokens,trigger_events\n"));
}
