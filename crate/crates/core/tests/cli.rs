use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dpbrem"))
}

fn config(name: &str) -> String {
    format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn run_honours_environment_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", &config("smoke.toml")])
        .env("DPBREM__OUTPUT__DIR", dir.path())
        .env("DPBREM__ROUNDS", "5")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["rounds"], 5);
    assert!(dir.path().join("metrics.csv").exists());
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn accountant_prints_one_row_per_client_size() {
    let out = bin().args(["accountant", &config("robustness.toml")]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].contains("epsilon_i"));
    // Equal shard sizes collapse to a single (p, n) row.
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1].split_whitespace().count(), 6);
}

#[test]
fn verify_reports_and_rejects_unknown_suites() {
    let out = bin().args(["verify", "momentum"]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("[PASS] momentum/"));
    assert!(!bin().args(["verify", "nope"]).status().unwrap().success());
}

#[test]
fn bad_config_fails_with_key_path() {
    let out = bin().args(["run", &config("smoke.toml")]).env("DPBREM__RULE__P", "2").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("rule.p"));
}
