use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_probdet"))
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn probdet")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn error_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(text.trim_end().lines().count(), 1, "{text}");
    text.trim_end().to_string()
}

#[test]
fn help_lists_every_flag_and_exit_code() {
    let top = String::from_utf8(ok(&["--help"]).stdout).unwrap();
    for needle in ["gen-data", "train", "eval", "bounds", "ablate", "sweep-proposals", "grad-check", "--threads"] {
        assert!(top.contains(needle), "missing {needle}");
    }
    for code in ["3  ", "4  ", "5  ", "6  "] {
        assert!(top.contains(code), "missing exit code {code}");
    }
    let cases: [(&str, &[&str]); 7] = [
        ("gen-data", &["--config", "--seed", "--out"]),
        ("train", &["--config", "--data", "--out", "--trace"]),
        ("eval", &["--model", "--data", "--out", "--config", "--budget"]),
        ("bounds", &["--grid", "--eps", "--out"]),
        ("ablate", &["--kind", "--config", "--out", "prob_ablation", "stage_style", "fed_loss"]),
        ("sweep-proposals", &["--config", "--out"]),
        ("grad-check", &["--config", "--step", "--tolerance"]),
    ];
    for (sub, flags) in cases {
        let help = String::from_utf8(ok(&[sub, "--help"]).stdout).unwrap();
        for f in flags {
            assert!(help.contains(f), "{sub} help lacks {f}");
        }
    }
}

#[test]
fn gen_data_is_deterministic_and_reruns_from_embedded_config() {
    let dir = tempfile::tempdir().unwrap();
    let smoke = repo_file("configs/smoke.json");
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let c = dir.path().join("c.json");
    ok(&["gen-data", "--config", p(&smoke), "--seed", "1", "--out", p(&a)]);
    ok(&["gen-data", "--config", p(&smoke), "--seed", "1", "--out", p(&b)]);
    ok(&["gen-data", "--config", p(&a), "--out", p(&c)]);
    let first = std::fs::read(&a).unwrap();
    assert_eq!(first, std::fs::read(&b).unwrap());
    assert_eq!(first, std::fs::read(&c).unwrap());

    let doc: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(doc["run_config"]["data"]["num_classes"], 3);
    assert!(doc["tool_version"].is_string());

    let d = dir.path().join("d.json");
    ok(&["gen-data", "--config", p(&smoke), "--seed", "2", "--out", p(&d)]);
    assert_ne!(first, std::fs::read(&d).unwrap());
}

#[test]
fn train_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let smoke = repo_file("configs/smoke.json");
    let data = dir.path().join("data.json");
    let m1 = dir.path().join("m1.json");
    let m2 = dir.path().join("m2.json");
    let trace = dir.path().join("trace.csv");
    ok(&["gen-data", "--config", p(&smoke), "--out", p(&data)]);
    ok(&["train", "--config", p(&smoke), "--data", p(&data), "--out", p(&m1), "--trace", p(&trace)]);
    ok(&["train", "--config", p(&m1), "--data", p(&data), "--out", p(&m2)]);
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());

    let rows = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(rows.lines().count(), 1 + 20);

    let report = dir.path().join("report.json");
    ok(&["eval", "--model", p(&m1), "--data", p(&data), "--out", p(&report), "--budget", "16"]);
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(doc["K"], 16);
    let map = doc["mAP"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
}

#[test]
fn perfect_fixture_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let out = ok(&[
        "eval",
        "--model",
        p(&repo_file("fixtures/perfect_model.json")),
        "--data",
        p(&repo_file("fixtures/perfect_dataset.json")),
        "--out",
        p(&report),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mAP 1.0000"));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(doc["mAP"].as_f64(), Some(1.0));
    assert_eq!(doc["AR"].as_f64(), Some(1.0));
}

#[test]
fn bounds_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("gap.csv");
    let out = ok(&["bounds", "--grid", "50", "--out", p(&csv)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("max gap 0.693"));
    let mut reader = csv::Reader::from_path(&csv).unwrap();
    let headers = reader.headers().unwrap().clone();
    let gap_col = headers.iter().position(|h| h == "gap").unwrap();
    let gaps: Vec<f64> = reader.records().map(|r| r.unwrap()[gap_col].parse().unwrap()).collect();
    assert_eq!(gaps.len(), 50 * 50);
    let max = gaps.iter().cloned().fold(f64::MIN, f64::max);
    assert!((max - std::f64::consts::LN_2).abs() < 1e-3);
    assert!(gaps.iter().all(|&g| g >= 0.0));
}

#[test]
fn grad_check_passes_on_smoke_config() {
    let out = ok(&["grad-check", "--config", p(&repo_file("configs/smoke.json"))]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("stage1.level0"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn ablate_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("ablate");
    ok(&["ablate", "--kind", "stage_style", "--config", p(&repo_file("configs/smoke.json")), "--out", p(&out_dir)]);
    let csv = std::fs::read_to_string(out_dir.join("stage_style.csv")).unwrap();
    assert!(csv.starts_with("condition,K,mAP,AR"));
    assert_eq!(csv.lines().count(), 1 + 3);
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("stage_style.json")).unwrap()).unwrap();
    assert_eq!(doc["run_config"]["trainer"]["iterations"], 20);
}

#[test]
fn missing_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen-data", "--config", p(&dir.path().join("nope.json")), "--out", p(&dir.path().join("x.json"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_line(&out).starts_with("error: code=io message="));
}

#[test]
fn unknown_config_key_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"trainer": {"iters": 5}}"#).unwrap();
    let out = run(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("x.json"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(error_line(&out).starts_with("error: code=config message="));
}

#[test]
fn diverging_training_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let smoke = repo_file("configs/smoke.json");
    let data = dir.path().join("data.json");
    ok(&["gen-data", "--config", p(&smoke), "--out", p(&data)]);
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&smoke).unwrap()).unwrap();
    cfg["trainer"]["learning_rate"] = serde_json::json!(1e300);
    let cfg_path = dir.path().join("hot.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = run(&["train", "--config", p(&cfg_path), "--data", p(&data), "--out", p(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(5));
    assert!(error_line(&out).starts_with("error: code=non_finite message="));
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(run(&["bounds"]).status.code(), Some(2));
    assert_eq!(run(&["ablate", "--kind", "nope", "--out", "x"]).status.code(), Some(2));
}
