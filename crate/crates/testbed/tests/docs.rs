use std::path::{Path, PathBuf};

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn json(rel: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(root().join(rel)).unwrap()).unwrap()
}

#[test]
fn openapi_lists_every_route() {
    let doc = std::fs::read_to_string(root().join("docs/openapi.yaml")).unwrap();
    for route in ["/status", "/ping", "/network", "/limits", "/events"] {
        assert!(doc.contains(&format!("\n  {route}:\n")), "{route} missing");
    }
    let status = serde_json::to_value(fogbed::agent::AgentStatus {
        agent: "a".into(),
        pid: 1,
        uptime_s: 0.0,
        applied_revision: 0,
        shaper_backend: fogbed::agent::BackendKind::Proxy,
        rules: 0,
        warnings: vec![],
        relay: None,
    })
    .unwrap();
    for key in status.as_object().unwrap().keys() {
        assert!(doc.contains(&format!("        {key}:")), "AgentStatus.{key} undocumented");
    }
}

#[test]
fn schemas_name_the_fixture_keys() {
    for (schema, fixture) in [
        ("infrastructure", "smart_factory_infra"),
        ("application", "smart_factory_app"),
        ("schedule", "smart_factory_schedule"),
    ] {
        let s = json(&format!("docs/schemas/{schema}.schema.json"));
        let f = json(&format!("fixtures/{fixture}.json"));
        for key in f.as_object().unwrap().keys() {
            assert!(s["properties"].get(key).is_some(), "{schema}: {key}");
        }
    }
}
