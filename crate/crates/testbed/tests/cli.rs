use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fogbed(dir: &Path, block: u8, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fogbed"))
        .args(args)
        .current_dir(dir)
        .env("FOGBED_LOCAL_BLOCK", block.to_string())
        .env_remove("FOGBED_STATE")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

struct Teardown<'a>(&'a Path, u8);

impl Drop for Teardown<'_> {
    fn drop(&mut self) {
        let _ = fogbed(self.0, self.1, &["destroy"]);
    }
}

#[test]
fn paths_show_prints_the_routed_delay() {
    let dir = tempfile::tempdir().unwrap();
    let infra = fixtures().join("routed_six_machines.json");
    let out = fogbed(dir.path(), 110, &["paths", "show", "M2", "M6", "--infra", infra.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("delay       10 ms"), "{}", stdout(&out));

    let out = fogbed(dir.path(), 110, &["--json", "paths", "show", "M2", "M6", "--infra", infra.to_str().unwrap()]);
    let v = json(&out);
    assert_eq!(v["delay_ms"], 10.0);
    assert_eq!(v["path"], serde_json::json!(["M2", "R1", "R2", "M6"]));
}

#[test]
fn paths_show_with_updates() {
    let dir = tempfile::tempdir().unwrap();
    let infra = fixtures().join("smart_factory_infra.json");
    let update = dir.path().join("e.json");
    std::fs::write(&update, r#"{"links":[{"from":"factory-server","to":"cloud","delay_ms_oneway":50}]}"#).unwrap();
    let out = fogbed(
        dir.path(),
        110,
        &["--json", "paths", "show", "factory-server", "cloud", "--infra", infra.to_str().unwrap(), "--update", update.to_str().unwrap()],
    );
    let v = json(&out);
    assert_eq!(v["delay_ms"], 18.0);
    assert_eq!(v["path"], serde_json::json!(["factory-server", "central-office-server", "cloud"]));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fogbed(dir.path(), 110, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(fogbed(dir.path(), 110, &["schedule", "validate"]).status.code(), Some(2));
    assert_eq!(fogbed(dir.path(), 110, &["bootstrap"]).status.code(), Some(2));
    assert_eq!(fogbed(dir.path(), 110, &["paths", "show", "a", "b"]).status.code(), Some(2));
    assert_eq!(fogbed(dir.path(), 110, &["--provider", "aws", "destroy"]).status.code(), Some(2));
    assert_eq!(fogbed(dir.path(), 110, &[]).status.code(), Some(2));
}

#[test]
fn schedule_validate_reports() {
    let dir = tempfile::tempdir().unwrap();
    let s = fixtures().join("memory_pressure_schedule.json");
    let infra = fixtures().join("routed_six_machines.json");
    let out = fogbed(dir.path(), 110, &["--json", "schedule", "validate", "--schedule", s.to_str().unwrap(), "--infra", infra.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert_eq!(json(&out)["states"], 5);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"initial":"A","states":[{"name":"A","transitions":[{"when":{"time":"1s"},"to":"NOWHERE"}]}]}"#).unwrap();
    let out = fogbed(dir.path(), 110, &["--json", "schedule", "validate", "--schedule", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["valid"], false);
}

#[test]
fn commands_without_a_testbed_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = fogbed(dir.path(), 111, &["agents", "install"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bootstrap"));
    // destroying nothing is fine
    assert!(fogbed(dir.path(), 111, &["destroy"]).status.success());
}

#[test]
fn partition_workflow_and_teardown() {
    let dir = tempfile::tempdir().unwrap();
    let infra = fixtures().join("smart_factory_infra.json");
    let infra = infra.to_str().unwrap();
    let _teardown = Teardown(dir.path(), 112);
    let ok = |args: &[&str]| {
        let out = fogbed(dir.path(), 112, args);
        assert!(out.status.success(), "{args:?}: {}{}", stdout(&out), String::from_utf8_lossy(&out.stderr));
        out
    };
    ok(&["bootstrap", "--infra", infra]);
    ok(&["bootstrap", "--infra", infra]);
    let state: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(".fogbed/state.json")).unwrap()).unwrap();
    assert_eq!(state["handles"].as_object().unwrap().len(), 8);
    ok(&["agents", "install"]);

    let update = dir.path().join("partition.json");
    std::fs::write(&update, r#"{"partitions":["factory-server"]}"#).unwrap();
    ok(&["network", "modify", "--update", update.to_str().unwrap()]);
    let configs = json(&ok(&["--json", "network", "show"]));
    for (agent, cfg) in configs.as_object().unwrap() {
        for e in cfg["entries"].as_array().unwrap() {
            let expect_blocked = agent == "factory-server" || e["target"] == "factory-server";
            assert_eq!(e["loss"] == 1.0, expect_blocked, "{agent} -> {}", e["target"]);
        }
    }
    ok(&["network", "modify", "--reset"]);
    let configs = json(&ok(&["--json", "network", "show"]));
    assert!(configs["camera"]["entries"].as_array().unwrap().iter().all(|e| e["loss"] == 0.0));
    assert_eq!(configs["camera"]["revision"], 3);

    let root = dir.path().join(".fogbed/testbed");
    assert!(!fogbed::provider::processes_mentioning(root.to_str().unwrap()).is_empty());
    let out = ok(&["--json", "destroy"]);
    assert_eq!(json(&out)["leaks"], serde_json::json!([]));
    assert!(fogbed::provider::processes_mentioning(root.to_str().unwrap()).is_empty());
    ok(&["destroy"]);
}
