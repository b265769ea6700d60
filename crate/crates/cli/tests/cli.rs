use std::process::Command;

fn qcurv() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qcurv"))
}

#[test]
fn kernel_check_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("kernel.json");
    let st = qcurv().args(["kernel-check", "--nodes", "20", "--out"]).arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(v["max_abs_error"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn solve_then_verify_and_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("rec.json");
    let st = qcurv().args(["solve", "--Lambda", "140", "--nodes", "500", "--out"]).arg(&rec).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&rec).unwrap()).unwrap();
    assert_eq!(v["record"]["converged"], serde_json::json!(true));
    assert!(v["diagnostics"]["pohozaev_residual"].as_f64().unwrap() < 0.01);

    let st = qcurv().arg("verify").arg(&rec).args(["--out"]).arg(dir.path().join("verify.json")).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let st = qcurv().args(["oracle", "--record"]).arg(&rec).args(["--out"]).arg(dir.path().join("oracle.json")).status().unwrap();
    assert_eq!(st.code(), Some(0));
}

#[test]
fn expect_failure_mode_is_not_a_nonconvergence_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rec.json");
    let st = qcurv().args(["solve", "--Lambda", "160", "--nodes", "400", "--expect-failure", "--out"]).arg(&out).status().unwrap();
    assert_ne!(st.code(), Some(3));
}

#[test]
fn sweep_writes_jsonl_with_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"kind": "finite_curvature_probe", "samples": 2, "seed": 3}"#).unwrap();
    let out = dir.path().join("out.jsonl");
    let st = qcurv().args(["sweep", "--config"]).arg(&cfg).args(["--out"]).arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    let hash = lines[0]["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(lines.iter().all(|l| l["config_hash"] == serde_json::json!(hash)));
}

#[test]
fn missing_inputs_are_an_error() {
    let st = qcurv().arg("solve").output().unwrap();
    assert!(!st.status.success());
    assert_ne!(st.status.code(), Some(0));
}
