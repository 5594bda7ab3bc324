use std::path::Path;
use std::process::Command;

use tempfile::tempdir;

fn ope(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ope"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_SWEEP: &str = r#"{
  "schema": "ope-sweep/1",
  "datasets": [{"synthetic": {"name": "mini", "num_classes": 3, "dim": 2, "per_class": 30, "separation": 2.0, "seed": 1}}],
  "sizes": [50, 90],
  "replicates": 6,
  "grid_size": 5,
  "oracle_tau": true,
  "trainer": {"iterations": 40}
}"#;

#[test]
fn usage_errors_exit_one() {
    assert_eq!(ope(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ope(&["sweep", "--bogus"]).status.code(), Some(1));
    assert_eq!(ope(&["--help"]).status.code(), Some(0));
    assert_eq!(ope_cli::dispatch(["ope", "nope"]), 1);
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("absent.json");
    let out = ope(&["sweep", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("r.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));
}

#[test]
fn sweep_writes_results_and_sidecar() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, SMALL_SWEEP).unwrap();
    let res = dir.path().join("r.csv");
    let out = ope(&["sweep", "--config", path_str(&cfg), "--out", path_str(&res)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&res).unwrap();
    assert!(text.starts_with("dataset,channel,n,estimator,replicates,mse_trunc,rel_mse,std_err,tau_mean\n"));
    assert!(text.contains("switch-dr-oracle"));
    let meta = std::fs::read_to_string(dir.path().join("r.csv.meta.json")).unwrap();
    assert!(meta.contains("\"truncation\": 1.0"));

    let again = dir.path().join("r2.csv");
    let out = Command::new(env!("CARGO_BIN_EXE_ope"))
        .args(["sweep", "--config", path_str(&cfg), "--out", path_str(&again)])
        .env("OPE_WORKERS", "3")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read(&res).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn bad_workers_value_is_rejected() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, SMALL_SWEEP).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ope"))
        .args(["sweep", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("r.csv"))])
        .env("OPE_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_simulate_evaluate_round_trip() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("d.csv");
    assert_eq!(ope(&["synth", "--name", "synth-02", "--out", path_str(&data)]).status.code(), Some(0));
    assert_eq!(
        ope(&["synth", "--classes", "4", "--dim", "3", "--per-class", "20", "--out", path_str(&dir.path().join("s.csv"))])
            .status
            .code(),
        Some(0)
    );

    let log = dir.path().join("log.jsonl");
    let out = ope(&["simulate", "--data", path_str(&data), "--n", "300", "--seed", "4", "--out", path_str(&log)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let (tp, lp) = ope_cli::model_paths(&log);
    assert!(tp.exists() && lp.exists());

    let eval = |estimator: &str, tau: &str| {
        ope(&[
            "evaluate",
            "--log",
            path_str(&log),
            "--target",
            path_str(&tp),
            "--logging",
            path_str(&lp),
            "--estimator",
            estimator,
            "--tau",
            tau,
        ])
    };
    let out = eval("switch-dr", "auto");
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["tuning"]["chosen_tau"].is_number());
    assert_eq!(v["tuning"]["taus"].as_array().unwrap().len(), 21);
    assert!(v["report"]["value"].is_number());

    for est in ["ips", "dm", "dr", "switch", "trim-ips", "trun-ips", "magic"] {
        let out = eval(est, "auto");
        assert_eq!(out.status.code(), Some(0), "{est}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = eval("switch", "2.5");
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["report"]["tau"], 2.5);
    assert_eq!(eval("nonsense", "auto").status.code(), Some(1));
    assert_eq!(eval("switch", "big").status.code(), Some(1));
}

#[test]
fn evaluate_rejects_corrupt_log() {
    let dir = tempdir().unwrap();
    let log = dir.path().join("bad.jsonl");
    std::fs::write(&log, "{\"num_actions\":2,\"dim\":1}\nnot json\n").unwrap();
    let model = dir.path().join("m.model");
    std::fs::write(&model, "junk").unwrap();
    let out = ope(&["evaluate", "--log", path_str(&log), "--target", path_str(&model), "--estimator", "ips"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn theory_check_writes_report() {
    let dir = tempdir().unwrap();
    let report = dir.path().join("t.json");
    let out = ope(&["theory-check", "--replicates", "300", "--out", path_str(&report)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let checks = v["checks"].as_array().unwrap();
    assert!(checks.len() > 20);
    assert!(checks.iter().all(|c| c["passed"].is_boolean()));
}
